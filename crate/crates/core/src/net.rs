//! Conditional quantile network.
//!
//! Inputs are the standardized continuous covariates, a species embedding
//! row, and the habitat-weighted mean of habitat embedding rows. A stack of
//! ReLU layers ends in a linear head producing 18 raw curve parameters
//! (three quantile blocks of six, lower quartile first). The network input is
//! also projected linearly into the pre-activation of one middle layer.
//!
//! Gradients are computed by a hand-written reverse pass over the fixed
//! architecture.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curve::{softplus_inv, N_PARAMS};
use crate::error::NetError;
use crate::features::PixelFeatures;

/// Width of the raw output vector.
pub const N_OUTPUTS: usize = 3 * N_PARAMS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_continuous: usize,
    /// Rows of the species table, Unknown included.
    pub n_species: usize,
    /// Rows of the habitat table, Unknown included.
    pub n_habitats: usize,
    pub species_dim: usize,
    pub habitat_dim: usize,
    pub hidden: usize,
    pub n_layers: usize,
    /// 1-based index of the hidden layer receiving the input projection.
    pub skip_into: usize,
}

impl Architecture {
    /// Eight 256-wide layers, embeddings of length 4 and 8, input projected
    /// into the fifth layer.
    pub fn standard(n_continuous: usize, n_species: usize, n_habitats: usize) -> Self {
        Self {
            n_continuous,
            n_species,
            n_habitats,
            species_dim: 4,
            habitat_dim: 8,
            hidden: 256,
            n_layers: 8,
            skip_into: 5,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.n_continuous + self.species_dim + self.habitat_dim
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.n_layers == 0 || self.hidden == 0 {
            return Err(NetError::Architecture("need at least one non-empty hidden layer".into()));
        }
        if self.skip_into == 0 || self.skip_into > self.n_layers {
            return Err(NetError::Architecture(format!(
                "skip target {} outside 1..={}",
                self.skip_into, self.n_layers
            )));
        }
        if self.n_species == 0 || self.n_habitats == 0 {
            return Err(NetError::Architecture("embedding tables need an Unknown row".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in × out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight);
        z += &self.bias;
        z
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Raw outputs of a generic temperate season: green-up at 0.25 and
/// senescence at 0.75 of the year, both lasting 0.1, with levels rising
/// from the lower to the upper quartile. Starting the head here keeps the
/// two transitions apart; with a zero bias they coincide and cancel.
pub fn head_bias_prior() -> [f64; N_OUTPUTS] {
    let levels = [(0.2, 0.6), (0.3, 0.7), (0.4, 0.8)];
    let mut out = [0.0; N_OUTPUTS];
    for (q, (lo, hi)) in levels.into_iter().enumerate() {
        let b = &mut out[q * N_PARAMS..(q + 1) * N_PARAMS];
        b[0] = logit((lo + 0.1) / 1.1);
        b[1] = logit((hi - lo) / (1.0 - lo));
        b[2] = logit(0.25);
        b[3] = logit(0.75);
        b[4] = softplus_inv(0.1);
        b[5] = softplus_inv(0.1);
    }
    out
}

/// All trainable tensors. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub arch: Architecture,
    pub species_embedding: Array2<f64>,
    pub habitat_embedding: Array2<f64>,
    /// `n_layers` ReLU layers followed by the linear head.
    pub layers: Vec<Dense>,
    /// `input_dim × hidden`, added to the pre-activation of `skip_into`.
    pub skip: Array2<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

impl NetworkWeights {
    pub fn zeros(arch: Architecture) -> Result<Self, NetError> {
        arch.validate()?;
        let mut layers = Vec::with_capacity(arch.n_layers + 1);
        layers.push(Dense::zeros(arch.input_dim(), arch.hidden));
        for _ in 1..arch.n_layers {
            layers.push(Dense::zeros(arch.hidden, arch.hidden));
        }
        layers.push(Dense::zeros(arch.hidden, N_OUTPUTS));
        Ok(Self {
            arch,
            species_embedding: Array2::zeros((arch.n_species, arch.species_dim)),
            habitat_embedding: Array2::zeros((arch.n_habitats, arch.habitat_dim)),
            layers,
            skip: Array2::zeros((arch.input_dim(), arch.hidden)),
        })
    }

    /// He-uniform ReLU layers, `±1/sqrt(fan_in)` head, `±0.05` embeddings
    /// and input projection. Hidden biases start at zero; the head bias
    /// starts at [`head_bias_prior`].
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, NetError> {
        let mut w = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.species_embedding = uniform(&mut rng, w.species_embedding.dim(), 0.05);
        w.habitat_embedding = uniform(&mut rng, w.habitat_embedding.dim(), 0.05);
        let n = w.layers.len();
        for (i, layer) in w.layers.iter_mut().enumerate() {
            let fan_in = layer.weight.nrows() as f64;
            let bound = if i + 1 < n { (6.0 / fan_in).sqrt() } else { fan_in.sqrt().recip() };
            layer.weight = uniform(&mut rng, layer.weight.dim(), bound);
        }
        w.skip = uniform(&mut rng, w.skip.dim(), 0.05);
        w.layers[n - 1].bias = Array1::from_vec(head_bias_prior().to_vec());
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch).expect("architecture already validated")
    }

    /// Tensor names in a fixed order matching [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["species_embedding".to_string(), "habitat_embedding".to_string()];
        let n = self.layers.len();
        for i in 0..n {
            let base = if i + 1 == n { "head".to_string() } else { format!("layer{}", i + 1) };
            names.push(format!("{base}.weight"));
            names.push(format!("{base}.bias"));
        }
        names.push("skip".to_string());
        names
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.species_embedding.as_slice().expect("standard layout"),
            self.habitat_embedding.as_slice().expect("standard layout"),
        ];
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out.push(self.skip.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.species_embedding.as_slice_mut().expect("standard layout"),
            self.habitat_embedding.as_slice_mut().expect("standard layout"),
        ];
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.skip.as_slice_mut().expect("standard layout"));
        out
    }

    /// Tensor shapes, in [`Self::tensors`] order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![self.species_embedding.shape().to_vec(), self.habitat_embedding.shape().to_vec()];
        for l in &self.layers {
            out.push(l.weight.shape().to_vec());
            out.push(l.bias.shape().to_vec());
        }
        out.push(self.skip.shape().to_vec());
        out
    }

    pub fn n_weights(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks that every tensor has the shape the architecture implies.
    pub fn check_shapes(&self) -> Result<(), NetError> {
        let expected = Self::zeros(self.arch)?.shapes();
        let got = self.shapes();
        if expected != got {
            return Err(NetError::Dimension(format!("weights have shapes {got:?}, architecture implies {expected:?}")));
        }
        Ok(())
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Rounds every weight to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = f64::from(*x as f32);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Assembles the network input rows for a batch of pixels.
    pub fn input_matrix(&self, pixels: &[&PixelFeatures]) -> Result<Array2<f64>, NetError> {
        let a = &self.arch;
        let mut x = Array2::zeros((pixels.len(), a.input_dim()));
        for (i, p) in pixels.iter().enumerate() {
            if p.continuous.len() != a.n_continuous {
                return Err(NetError::Dimension(format!(
                    "pixel {} has {} continuous features, network expects {}",
                    p.pixel_id,
                    p.continuous.len(),
                    a.n_continuous
                )));
            }
            if p.species >= a.n_species {
                return Err(NetError::IndexOutOfBounds { what: "species", index: p.species, len: a.n_species });
            }
            let mut row = x.row_mut(i);
            for (k, &v) in p.continuous.iter().enumerate() {
                row[k] = v;
            }
            let off = a.n_continuous;
            row.slice_mut(s![off..off + a.species_dim]).assign(&self.species_embedding.row(p.species));
            let off = off + a.species_dim;
            let mut hab = row.slice_mut(s![off..off + a.habitat_dim]);
            for &(h, w) in &p.habitats {
                if h >= a.n_habitats {
                    return Err(NetError::IndexOutOfBounds { what: "habitat", index: h, len: a.n_habitats });
                }
                hab.scaled_add(w, &self.habitat_embedding.row(h));
            }
        }
        Ok(x)
    }

    /// Raw outputs (`batch × 18`) plus the activations needed by
    /// [`Self::backward`].
    pub fn forward(&self, pixels: &[&PixelFeatures]) -> Result<(Array2<f64>, ForwardCache), NetError> {
        let x0 = self.input_matrix(pixels)?;
        let n_hidden = self.arch.n_layers;
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(n_hidden);
        for l in 0..n_hidden {
            let input = if l == 0 { x0.view() } else { activations[l - 1].view() };
            let mut z = self.layers[l].affine(input);
            if l + 1 == self.arch.skip_into {
                z += &x0.dot(&self.skip);
            }
            z.mapv_inplace(|v| v.max(0.0));
            activations.push(z);
        }
        let out = self.layers[n_hidden].affine(activations[n_hidden - 1].view());
        let cache = ForwardCache {
            x0,
            activations,
            species: pixels.iter().map(|p| p.species).collect(),
            habitats: pixels.iter().map(|p| p.habitats.clone()).collect(),
        };
        Ok((out, cache))
    }

    /// Raw outputs only.
    pub fn predict_raw(&self, pixels: &[&PixelFeatures]) -> Result<Array2<f64>, NetError> {
        self.forward(pixels).map(|(out, _)| out)
    }

    /// Gradient of a loss with respect to every weight, given the gradient
    /// with respect to the raw outputs of the cached batch.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> Result<Self, NetError> {
        let a = self.arch;
        let batch = cache.x0.nrows();
        if d_out.dim() != (batch, N_OUTPUTS) {
            return Err(NetError::Dimension(format!(
                "output gradient is {:?}, expected ({batch}, {N_OUTPUTS})",
                d_out.dim()
            )));
        }
        if cache.activations.len() != a.n_layers
            || cache.x0.ncols() != a.input_dim()
            || cache.activations.iter().any(|h| h.dim() != (batch, a.hidden))
        {
            return Err(NetError::Dimension("forward cache does not match the weights".into()));
        }
        let mut grad = self.zeros_like();
        let n_hidden = a.n_layers;

        let last = &cache.activations[n_hidden - 1];
        grad.layers[n_hidden].weight = last.t().dot(d_out);
        grad.layers[n_hidden].bias = d_out.sum_axis(Axis(0));
        let mut d_act = d_out.dot(&self.layers[n_hidden].weight.t());
        let mut d_x0 = Array2::<f64>::zeros(cache.x0.dim());

        for l in (0..n_hidden).rev() {
            // ReLU mask from the post-activation: zero means inactive
            let mut d_z = d_act;
            d_z.zip_mut_with(&cache.activations[l], |g, &h| {
                if h <= 0.0 {
                    *g = 0.0;
                }
            });
            let input = if l == 0 { cache.x0.view() } else { cache.activations[l - 1].view() };
            grad.layers[l].weight = input.t().dot(&d_z);
            grad.layers[l].bias = d_z.sum_axis(Axis(0));
            if l + 1 == a.skip_into {
                grad.skip = cache.x0.t().dot(&d_z);
                d_x0 += &d_z.dot(&self.skip.t());
            }
            let d_in = d_z.dot(&self.layers[l].weight.t());
            if l == 0 {
                d_x0 += &d_in;
                d_act = Array2::zeros((0, 0));
            } else {
                d_act = d_in;
            }
        }

        let sp_off = a.n_continuous;
        let hab_off = sp_off + a.species_dim;
        for i in 0..batch {
            let row = d_x0.row(i);
            let mut sp = grad.species_embedding.row_mut(cache.species[i]);
            sp += &row.slice(s![sp_off..sp_off + a.species_dim]);
            let d_hab = row.slice(s![hab_off..hab_off + a.habitat_dim]);
            for &(h, w) in &cache.habitats[i] {
                grad.habitat_embedding.row_mut(h).scaled_add(w, &d_hab);
            }
        }
        Ok(grad)
    }
}

/// Activations kept from [`NetworkWeights::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x0: Array2<f64>,
    /// Post-ReLU activations of each hidden layer.
    pub activations: Vec<Array2<f64>>,
    pub species: Vec<usize>,
    pub habitats: Vec<Vec<(usize, f64)>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture {
            n_continuous: 3,
            n_species: 4,
            n_habitats: 5,
            species_dim: 2,
            habitat_dim: 3,
            hidden: 8,
            n_layers: 3,
            skip_into: 2,
        }
    }

    fn pixel(rng: &mut ChaCha8Rng, arch: &Architecture) -> PixelFeatures {
        let h1 = rng.random_range(0..arch.n_habitats);
        let h2 = (h1 + 1) % arch.n_habitats;
        let w: f64 = rng.random_range(0.1..0.9);
        let mut habitats = vec![(h1, w), (h2, 1.0 - w)];
        habitats.sort_by_key(|h| h.0);
        PixelFeatures {
            pixel_id: rng.random(),
            continuous: (0..arch.n_continuous).map(|_| rng.random_range(-2.0..2.0)).collect(),
            species: rng.random_range(0..arch.n_species),
            habitats,
        }
    }

    /// Straight-line matrix arithmetic on nested vectors.
    fn reference_forward(w: &NetworkWeights, p: &PixelFeatures) -> Vec<f64> {
        let a = w.arch;
        let mut x: Vec<f64> = p.continuous.clone();
        for d in 0..a.species_dim {
            x.push(w.species_embedding[[p.species, d]]);
        }
        for d in 0..a.habitat_dim {
            x.push(p.habitats.iter().map(|&(h, wt)| wt * w.habitat_embedding[[h, d]]).sum());
        }
        let affine = |layer: &Dense, v: &[f64]| -> Vec<f64> {
            (0..layer.weight.ncols())
                .map(|j| layer.bias[j] + (0..v.len()).map(|i| v[i] * layer.weight[[i, j]]).sum::<f64>())
                .collect()
        };
        let mut h = x.clone();
        for l in 0..a.n_layers {
            let mut z = affine(&w.layers[l], &h);
            if l + 1 == a.skip_into {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += (0..x.len()).map(|i| x[i] * w.skip[[i, j]]).sum::<f64>();
                }
            }
            h = z.into_iter().map(|v| v.max(0.0)).collect();
        }
        affine(&w.layers[a.n_layers], &h)
    }

    #[test]
    fn standard_architecture_shapes() {
        let w = NetworkWeights::zeros(Architecture::standard(12, 7, 11)).unwrap();
        assert_eq!(w.layers.len(), 9);
        assert_eq!(w.layers[0].weight.dim(), (24, 256));
        assert_eq!(w.layers[7].weight.dim(), (256, 256));
        assert_eq!(w.layers[8].weight.dim(), (256, 18));
        assert_eq!(w.skip.dim(), (24, 256));
        assert_eq!(w.species_embedding.dim(), (7, 4));
        assert_eq!(w.habitat_embedding.dim(), (11, 8));
        w.check_shapes().unwrap();
        assert_eq!(w.tensor_names().len(), w.tensors().len());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let arch = small_arch();
        let w = NetworkWeights::zeros(arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = pixel(&mut rng, &arch);
        let out = w.predict_raw(&[&p]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concentrated_habitat_selects_embedding_row() {
        let arch = small_arch();
        let w = NetworkWeights::init(arch, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = pixel(&mut rng, &arch);
        p.habitats = vec![(3, 1.0)];
        let x = w.input_matrix(&[&p]).unwrap();
        let off = arch.n_continuous + arch.species_dim;
        for d in 0..arch.habitat_dim {
            assert_eq!(x[[0, off + d]], w.habitat_embedding[[3, d]]);
        }
    }

    #[test]
    fn forward_matches_reference_arithmetic() {
        let arch = small_arch();
        let w = NetworkWeights::init(arch, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pixels: Vec<_> = (0..20).map(|_| pixel(&mut rng, &arch)).collect();
        let refs: Vec<_> = pixels.iter().collect();
        let out = w.predict_raw(&refs).unwrap();
        for (i, p) in pixels.iter().enumerate() {
            let want = reference_forward(&w, p);
            for j in 0..N_OUTPUTS {
                assert!((out[[i, j]] - want[j]).abs() < 1e-10);
            }
        }
        // batch order does not matter
        let rev: Vec<_> = pixels.iter().rev().collect();
        let out_rev = w.predict_raw(&rev).unwrap();
        for i in 0..pixels.len() {
            assert_eq!(out.row(i), out_rev.row(pixels.len() - 1 - i));
        }
    }

    #[test]
    fn out_of_bounds_indices_are_errors() {
        let arch = small_arch();
        let w = NetworkWeights::init(arch, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = pixel(&mut rng, &arch);
        p.species = arch.n_species;
        assert!(matches!(w.forward(&[&p]), Err(NetError::IndexOutOfBounds { what: "species", .. })));
        let mut p = pixel(&mut rng, &arch);
        p.habitats = vec![(arch.n_habitats + 2, 1.0)];
        assert!(matches!(w.forward(&[&p]), Err(NetError::IndexOutOfBounds { what: "habitat", .. })));
        let mut p = pixel(&mut rng, &arch);
        p.continuous.push(0.0);
        assert!(matches!(w.forward(&[&p]), Err(NetError::Dimension(_))));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradient() {
        let arch = small_arch();
        let w = NetworkWeights::init(arch, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = pixel(&mut rng, &arch);
        let (_, cache) = w.forward(&[&p]).unwrap();
        let g = w.backward(&cache, &Array2::zeros((1, N_OUTPUTS))).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_mismatched_shapes() {
        let arch = small_arch();
        let w = NetworkWeights::init(arch, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = pixel(&mut rng, &arch);
        let (_, cache) = w.forward(&[&p]).unwrap();
        assert!(w.backward(&cache, &Array2::zeros((2, N_OUTPUTS))).is_err());
        let other = NetworkWeights::init(Architecture { hidden: 5, ..arch }, 1).unwrap();
        assert!(other.backward(&cache, &Array2::zeros((1, N_OUTPUTS))).is_err());
    }

    #[test]
    fn absent_habitat_gets_zero_gradient() {
        let arch = small_arch();
        let w = NetworkWeights::init(arch, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = pixel(&mut rng, &arch);
        p.habitats = vec![(1, 0.7), (2, 0.0), (4, 0.3)];
        let (_, cache) = w.forward(&[&p]).unwrap();
        let d_out = Array2::from_shape_fn((1, N_OUTPUTS), |(_, j)| (j as f64 * 0.37).sin());
        let g = w.backward(&cache, &d_out).unwrap();
        assert!(g.habitat_embedding.row(2).iter().all(|&v| v == 0.0));
        assert!(g.habitat_embedding.row(0).iter().all(|&v| v == 0.0));
        assert!(g.habitat_embedding.row(1).iter().any(|&v| v != 0.0));
    }

    /// Scalar objective `sum(c ⊙ out)` so the output gradient is `c`.
    fn objective(w: &NetworkWeights, pixels: &[&PixelFeatures], c: &Array2<f64>) -> f64 {
        (&w.predict_raw(pixels).unwrap() * c).sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        for (arch, seed) in [
            (small_arch(), 11),
            (Architecture { n_layers: 2, skip_into: 2, ..small_arch() }, 12),
            (Architecture { n_layers: 1, skip_into: 1, ..small_arch() }, 13),
        ] {
            let w = NetworkWeights::init(arch, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let pixels: Vec<_> = (0..6).map(|_| pixel(&mut rng, &arch)).collect();
            let refs: Vec<_> = pixels.iter().collect();
            let c = Array2::from_shape_simple_fn((pixels.len(), N_OUTPUTS), || rng.random_range(-1.0..1.0));
            let (_, cache) = w.forward(&refs).unwrap();
            let g = w.backward(&cache, &c).unwrap();
            let grads: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.to_vec()).collect();
            let eps = 1e-5;
            let n_tensors = grads.len();
            let mut checked = 0;
            while checked < 200 {
                let ti = rng.random_range(0..n_tensors);
                let len = grads[ti].len();
                let k = rng.random_range(0..len);
                let mut plus = w.clone();
                plus.tensors_mut()[ti][k] += eps;
                let mut minus = w.clone();
                minus.tensors_mut()[ti][k] -= eps;
                let fd = (objective(&plus, &refs, &c) - objective(&minus, &refs, &c)) / (2.0 * eps);
                let an = grads[ti][k];
                let scale = an.abs().max(fd.abs()).max(1e-6);
                assert!((an - fd).abs() / scale < 1e-4, "tensor {ti} idx {k}: {an} vs {fd}");
                checked += 1;
            }
        }
    }

    #[test]
    fn output_is_affine_in_habitat_weights() {
        let arch = small_arch();
        let w = NetworkWeights::init(arch, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut p = pixel(&mut rng, &arch);
        p.habitats = vec![(1, 0.5), (3, 0.5)];
        let c = Array2::from_shape_simple_fn((1, N_OUTPUTS), || rng.random_range(-1.0..1.0));
        let (_, cache) = w.forward(&[&p]).unwrap();
        let g = w.backward(&cache, &c).unwrap();
        // analytic directional derivative for moving weight from habitat 3 to 1:
        // d/ds sum(c ⊙ out) = (e1 - e3) · dL/d(habitat vector)
        // habitat 1 carries weight 0.5, so its row gradient is half of dL/d(habitat vector)
        let d_hab: Vec<f64> = (0..arch.habitat_dim).map(|d| g.habitat_embedding[[1, d]] / 0.5).collect();
        let dir: f64 =
            (0..arch.habitat_dim).map(|d| d_hab[d] * (w.habitat_embedding[[1, d]] - w.habitat_embedding[[3, d]])).sum();
        let s = 1e-6;
        let mut plus = p.clone();
        plus.habitats = vec![(1, 0.5 + s), (3, 0.5 - s)];
        let mut minus = p.clone();
        minus.habitats = vec![(1, 0.5 - s), (3, 0.5 + s)];
        let fd = (objective(&w, &[&plus], &c) - objective(&w, &[&minus], &c)) / (2.0 * s);
        assert!((fd - dir).abs() < 1e-6 * dir.abs().max(1.0));
    }

    #[test]
    fn init_is_seeded() {
        let arch = small_arch();
        assert_eq!(NetworkWeights::init(arch, 1).unwrap(), NetworkWeights::init(arch, 1).unwrap());
        assert_ne!(NetworkWeights::init(arch, 1).unwrap(), NetworkWeights::init(arch, 2).unwrap());
        let w = NetworkWeights::init(arch, 1).unwrap();
        assert!(w.species_embedding.iter().all(|v| v.abs() <= 0.05));
        assert!(w.all_finite());
    }
}
