use forest_browning::checkpoint::{Checkpoint, Model};
use forest_browning::features::{fit_preprocessor, PreprocessorState};
use forest_browning::synth::{self, SynthConfig};
use forest_browning::train::{self, AdamW, AdamWConfig, EpochLog, LossConfig, TrainConfig};
use forest_browning::{dataset, Dataset};

fn small_corpus(seed: u64) -> (PreprocessorState, Dataset) {
    let corpus = synth::generate(&SynthConfig { n_pixels: 200, years: 1, seed, ..Default::default() }).unwrap();
    let state = fit_preprocessor(&corpus.pixels).unwrap();
    let ds = dataset::prepare(&state, &corpus.pixels, &corpus.observations).dataset;
    (state, ds)
}

fn small_net(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: 0.002,
        hidden: 16,
        n_layers: 2,
        skip_into: 1,
        species_dim: 2,
        habitat_dim: 2,
        ..Default::default()
    }
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(cfg, &[3]);
    let mut p = vec![0.5, -2.0, 7.0];
    for _ in 0..10 {
        opt.update(&mut [&mut p[..]], &[&[0.0, 0.0, 0.0][..]], 0.01).unwrap();
    }
    assert_eq!(p, vec![0.5, -2.0, 7.0]);
}

#[test]
fn adamw_decay_alone_shrinks_geometrically() {
    let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
    let mut p = [3.0];
    let lr = 0.005;
    for _ in 0..50 {
        opt.update(&mut [&mut p[..]], &[&[0.0][..]], lr).unwrap();
    }
    let expect = 3.0 * (1.0 - lr * 1e-4f64).powi(50);
    assert!((p[0] - expect).abs() < 1e-15);
}

#[test]
fn adamw_on_a_quadratic_bowl_matches_scalar_loop() {
    let c = [1.5, -0.5];
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.01, ..Default::default() }, &[2]);
    let mut p = [0.0, 0.0];
    let lr = 0.05;
    let (mut q, mut m, mut v) = ([0.0f64; 2], [0.0f64; 2], [0.0f64; 2]);
    for step in 1..=100 {
        let g: Vec<f64> = p.iter().zip(&c).map(|(x, c)| 2.0 * (x - c)).collect();
        opt.update(&mut [&mut p[..]], &[&g[..]], lr).unwrap();
        for i in 0..2 {
            let gi = 2.0 * (q[i] - c[i]);
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(step));
            let vh = v[i] / (1.0 - 0.999f64.powi(step));
            q[i] = q[i] * (1.0 - lr * 0.01) - lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    for i in 0..2 {
        assert!((p[i] - q[i]).abs() < 1e-12);
        assert!((p[i] - c[i]).abs() < 0.1);
    }
}

#[test]
fn training_lowers_the_loss_and_reports_every_epoch() {
    let (state, ds) = small_corpus(1);
    let mut logs: Vec<EpochLog> = Vec::new();
    let model =
        train::fit_with_progress(&ds, &state, &small_net(6), &LossConfig::default(), &mut |l| logs.push(*l))
            .unwrap();
    assert_eq!(logs.len(), 6);
    assert_eq!(logs, model.training_log);
    assert_eq!(logs.iter().map(|l| l.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
    assert!(logs[5].total < logs[0].total, "{} vs {}", logs[5].total, logs[0].total);
    assert!(logs[5].learning_rate < logs[0].learning_rate);
}

#[test]
fn strong_periodicity_weight_closes_the_year() {
    let (state, ds) = small_corpus(2);
    let gap = |lambda_per: f64| {
        let loss = LossConfig { lambda_per, ..Default::default() };
        let model = train::fit(&ds, &state, &small_net(15), &loss).unwrap();
        let curves = model.predict(&ds.pixels).unwrap();
        curves
            .iter()
            .flat_map(|c| c.curves.iter().map(|p| (p.value_unchecked(0.0) - p.value_unchecked(1.0)).abs()))
            .fold(0.0, f64::max)
    };
    let loose = gap(0.0);
    let tight = gap(1e6);
    assert!(tight < loose / 5.0, "max gap {tight} with the penalty, {loose} without");
}

#[test]
fn resume_with_zero_epochs_is_identity() {
    let (state, ds) = small_corpus(3);
    let model = train::fit(&ds, &state, &small_net(2), &LossConfig::default()).unwrap();
    let again = train::resume(&model, &ds, 0, &mut |_| {}).unwrap();
    assert_eq!(again, model);
    let more = train::resume(&model, &ds, 1, &mut |_| {}).unwrap();
    assert_eq!(more.training_log.len(), 3);
    assert_eq!(more.training_log[2].epoch, 3);
}

#[test]
fn thread_count_does_not_change_the_weights() {
    let (state, ds) = small_corpus(4);
    let cfg = TrainConfig { batch_size: 150, ..small_net(2) };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train::fit(&ds, &state, &cfg, &LossConfig::default()).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn checkpoint_reload_predicts_identically() {
    let (state, ds) = small_corpus(5);
    let model = train::fit(&ds, &state, &small_net(1), &LossConfig::default()).unwrap();
    let ckpt = Checkpoint::new("fit", Model::Conditional(model));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.model.predict_dataset(&ds).unwrap(), ckpt.model.predict_dataset(&ds).unwrap());
}
