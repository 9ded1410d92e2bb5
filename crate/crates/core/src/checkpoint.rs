//! JSON checkpoint documents for trained models and baselines.
//!
//! Network tensors are stored as base64 little-endian `f32` with explicit
//! shapes. A freshly trained model is rounded to `f32` before it is returned,
//! so save followed by load reproduces it exactly.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::baselines::{ClimatologyBaseline, GlobalBaseline};
use crate::curve::N_PARAMS;
use crate::dataset::Dataset;
use crate::error::{FormatError, NetError};
use crate::features::PixelFeatures;
use crate::net::{Architecture, NetworkWeights, N_OUTPUTS};
use crate::train::{ConditionalModel, QUANTILES};

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Layout of the network output: one block per quantile level, each holding
/// these raw values before the parameter transform.
pub const OUTPUT_PARAMETERS: [&str; N_PARAMS] = ["ndvi_min", "ndvi_max", "sos", "sen", "matsos", "eossen"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Conditional(ConditionalModel),
    Global(GlobalBaseline),
    Climatology(ClimatologyBaseline),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Conditional(_) => "conditional",
            Model::Global(_) => "global",
            Model::Climatology(_) => "climatology",
        }
    }

    fn check_features(&self, pixels: &[PixelFeatures]) -> Result<(), NetError> {
        if let Model::Conditional(m) = self {
            let want = m.weights.arch.n_continuous;
            if let Some(p) = pixels.iter().find(|p| p.continuous.len() != want) {
                return Err(NetError::Dimension(format!(
                    "pixel {} has {} continuous features, the model expects {want}",
                    p.pixel_id,
                    p.continuous.len()
                )));
            }
        }
        Ok(())
    }

    /// Quartiles for each pixel on each day of `grid`, indexed
    /// `[pixel][day]`. Days are expected in `[0, 1]`.
    pub fn predict_grid(&self, pixels: &[PixelFeatures], grid: &[f64]) -> Result<Vec<Vec<[f64; 3]>>, NetError> {
        self.check_features(pixels)?;
        Ok(match self {
            Model::Conditional(m) => {
                m.predict(pixels)?.iter().map(|c| grid.iter().map(|&t| c.values_unchecked(t)).collect()).collect()
            }
            Model::Global(g) => vec![grid.iter().map(|&t| g.predict(t)).collect(); pixels.len()],
            Model::Climatology(c) => vec![grid.iter().map(|&t| c.predict(t)).collect(); pixels.len()],
        })
    }

    /// Quartiles at every observation of `ds`, in dataset order.
    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<[f64; 3]>, NetError> {
        self.check_features(&ds.pixels)?;
        Ok(match self {
            Model::Conditional(m) => {
                let curves = m.predict(&ds.pixels)?;
                let mut out = Vec::with_capacity(ds.n_observations());
                for (i, c) in curves.iter().enumerate() {
                    out.extend(ds.observation_range(i).map(|j| c.values_unchecked(ds.t[j])));
                }
                out
            }
            Model::Global(g) => ds.t.iter().map(|&t| g.predict(t)).collect(),
            Model::Climatology(c) => ds.t.iter().map(|&t| c.predict(t)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub command: String,
    pub quantiles: [f64; 3],
    pub model: Model,
}

impl Checkpoint {
    pub fn new(command: &str, model: Model) -> Self {
        Self { schema_version: CHECKPOINT_SCHEMA, command: command.to_string(), quantiles: QUANTILES, model }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, FormatError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| FormatError::Checkpoint(e.to_string()))?;
        let found = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| FormatError::Checkpoint("missing schema_version".into()))?;
        if found != u64::from(CHECKPOINT_SCHEMA) {
            return Err(FormatError::SchemaVersion { found: found as u32, expected: CHECKPOINT_SCHEMA });
        }
        serde_json::from_value(value).map_err(|e| FormatError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_json())
            .map_err(|source| FormatError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| FormatError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct WeightsDoc {
    architecture: Architecture,
    output_parameters: Vec<String>,
    tensors: Vec<TensorDoc>,
}

fn encode(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode(text: &str, expected: usize) -> Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() != 4 * expected {
        return Err(format!("{} bytes for {expected} values", bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect())
}

impl From<NetworkWeights> for WeightsDoc {
    fn from(w: NetworkWeights) -> Self {
        let tensors = w
            .tensor_names()
            .into_iter()
            .zip(w.shapes())
            .zip(w.tensors())
            .map(|((name, shape), data)| TensorDoc { name, shape, dtype: "f32le".into(), data: encode(data) })
            .collect();
        WeightsDoc {
            architecture: w.arch,
            output_parameters: OUTPUT_PARAMETERS.iter().map(|s| s.to_string()).collect(),
            tensors,
        }
    }
}

impl TryFrom<WeightsDoc> for NetworkWeights {
    type Error = String;

    fn try_from(doc: WeightsDoc) -> Result<Self, String> {
        let mut w = NetworkWeights::zeros(doc.architecture).map_err(|e| e.to_string())?;
        let names = w.tensor_names();
        let shapes = w.shapes();
        if doc.tensors.len() != names.len() {
            return Err(format!("{} tensors, architecture needs {}", doc.tensors.len(), names.len()));
        }
        for ((t, name), shape) in doc.tensors.iter().zip(&names).zip(&shapes) {
            if &t.name != name || &t.shape != shape {
                return Err(format!("tensor `{}` {:?} where `{name}` {shape:?} was expected", t.name, t.shape));
            }
            if t.dtype != "f32le" {
                return Err(format!("unsupported dtype `{}`", t.dtype));
            }
        }
        let mut decoded = Vec::with_capacity(names.len());
        for (t, shape) in doc.tensors.iter().zip(&shapes) {
            decoded.push(decode(&t.data, shape.iter().product())?);
        }
        for (dst, src) in w.tensors_mut().into_iter().zip(decoded) {
            dst.copy_from_slice(&src);
        }
        debug_assert_eq!(w.layers.last().map(|l| l.bias.len()), Some(N_OUTPUTS));
        Ok(w)
    }
}

impl Serialize for NetworkWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WeightsDoc::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for NetworkWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = WeightsDoc::deserialize(d)?;
        NetworkWeights::try_from(doc).map_err(serde::de::Error::custom)
    }
}
