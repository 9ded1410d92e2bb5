//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`)
//! and prints one PASS/FAIL line per criterion; exits non-zero on any FAIL.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use chrono::NaiveDate;
use forest_browning::anomaly::{self, AnomalyConfig, AnomalyRecord};
use forest_browning::baselines::{fit_climatology, fit_global, ClimatologyBaseline, GlobalBaseline};
use forest_browning::curve::PhenologyParams;
use forest_browning::features::{fit_preprocessor, PixelFeatures};
use forest_browning::metrics::{self, Observations};
use forest_browning::net::{Architecture, NetworkWeights};
use forest_browning::synth::{self, Injection, NoiseFamily, Recovery, SynthConfig, SynthCorpus};
use forest_browning::train::loss::crossing_grid;
use forest_browning::train::{
    self, chunked_batches, ConditionalModel, DayWeights, LossConfig, TrainConfig, CROSSING_PAIRS, QUANTILES,
};
use forest_browning::{dataset, Dataset, QuantileCurveSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = (bool, String);

struct Report {
    failed: usize,
}

impl Report {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let (pass, detail) = f();
        let secs = start.elapsed().as_secs_f64();
        if !pass {
            self.failed += 1;
        }
        println!("{} {name} ({secs:.1}s): {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

// ---------------------------------------------------------------- gradients

fn branch_signature(raw: &ndarray::Array2<f64>, ds: &Dataset) -> (Vec<bool>, f64) {
    let mut sig = Vec::new();
    let mut closest = f64::INFINITY;
    let grid = crossing_grid(52);
    for i in 0..ds.n_pixels() {
        let set = QuantileCurveSet::from_raw(raw.row(i).as_slice().unwrap()).unwrap();
        for k in ds.observation_range(i) {
            for f in set.values_unchecked(ds.t[k]) {
                sig.push(ds.ndvi[k] > f);
                closest = closest.min((ds.ndvi[k] - f).abs());
            }
        }
        for &t in &grid {
            let v = set.values_unchecked(t);
            sig.extend(CROSSING_PAIRS.iter().map(|&(a, b)| v[a] > v[b]));
        }
    }
    (sig, closest)
}

fn gradient_check() -> Check {
    let corpus = synth::generate(&SynthConfig { n_pixels: 24, years: 1, seed: 3, ..Default::default() }).unwrap();
    let state = fit_preprocessor(&corpus.pixels).unwrap();
    let ds = dataset::prepare(&state, &corpus.pixels, &corpus.observations).dataset;
    let arch = Architecture {
        n_continuous: state.feature_names.len(),
        n_species: state.n_species(),
        n_habitats: state.n_habitats(),
        species_dim: 2,
        habitat_dim: 3,
        hidden: 8,
        n_layers: 2,
        skip_into: 2,
    };
    let w = NetworkWeights::init(arch, 5).unwrap();
    let pixels: Vec<&PixelFeatures> = ds.pixels.iter().collect();
    let idx: Vec<usize> = (0..ds.n_pixels()).collect();
    let dw = DayWeights::for_dataset(&ds);
    let cfg = LossConfig::default();
    let eval = |w: &NetworkWeights| {
        let raw = w.predict_raw(&pixels).unwrap();
        let (bd, _) = train::loss_gradient(&raw, &ds, &idx, &dw, &cfg).unwrap();
        (bd.total(&cfg), raw)
    };
    let (raw, cache) = w.forward(&pixels).unwrap();
    let (_, d_raw) = train::loss_gradient(&raw, &ds, &idx, &dw, &cfg).unwrap();
    let grad = w.backward(&cache, &d_raw).unwrap();
    let gflat: Vec<f64> = grad.tensors().iter().flat_map(|t| t.iter().copied()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-6;
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    let mut attempts = 0;
    while checked < 200 && attempts < 2000 {
        attempts += 1;
        let c = rng.random_range(0..gflat.len());
        let shifted = |delta: f64| {
            let mut v = w.clone();
            let mut k = c;
            for t in v.tensors_mut() {
                if k < t.len() {
                    t[k] += delta;
                    break;
                }
                k -= t.len();
            }
            eval(&v)
        };
        let (lp, rp) = shifted(h);
        let (lm, rm) = shifted(-h);
        let (sp, cp) = branch_signature(&rp, &ds);
        let (sm, cm) = branch_signature(&rm, &ds);
        if sp != sm || cp < 1e-6 || cm < 1e-6 {
            skipped += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * h);
        let an = gflat[c];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
        checked += 1;
    }
    (
        checked == 200 && worst < 1e-4,
        format!(
            "{checked} coordinates of {} weights, {skipped} near a kink skipped, max relative error {worst:.2e}",
            gflat.len()
        ),
    )
}

// ------------------------------------------------------------------- oracle

fn curve_oracle() -> Check {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/curve_oracle.tsv");
    let text = std::fs::read_to_string(&path).unwrap();
    let (mut n, mut worst) = (0usize, 0.0f64);
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split('\t').map(|s| s.parse().unwrap()).collect();
        let p = PhenologyParams { ndvi_min: v[0], ndvi_max: v[1], sos: v[2], matsos: v[3], sen: v[4], eossen: v[5] };
        let got = p.evaluate(v[6]).unwrap();
        worst = worst.max((got - v[7]).abs());
        n += 1;
    }
    (n == 10_000 && worst < 1e-10, format!("{n} pairs, max abs error {worst:.2e}"))
}

// ------------------------------------------------------------------- loader

fn loader_property() -> Check {
    let n = 20_000;
    let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
    let batches = chunked_batches(n, 1024, 8192, 5, 0);
    let mut emitted: Vec<u64> = batches.iter().flatten().map(|&i| ids[i]).collect();
    emitted.sort_unstable();
    let mut expect = ids.clone();
    expect.sort_unstable();
    let max_batch = batches.iter().map(Vec::len).max().unwrap();
    (
        emitted == expect && max_batch <= 1024,
        format!("{} batches, {} ids emitted for {n} pixels, largest batch {max_batch}", batches.len(), emitted.len()),
    )
}

// ---------------------------------------------------------------- synthetic

const EVENT_START: (i32, u32, u32) = (2019, 6, 15);
const EVENT_DAYS: u32 = 60;

fn event_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(EVENT_START.0, EVENT_START.1, EVENT_START.2).unwrap()
}

fn corpus_config() -> SynthConfig {
    SynthConfig {
        n_pixels: 20_000,
        years: 3,
        noise: NoiseFamily::Gaussian,
        upper_spread_ratio: 0.6,
        seed: 2024,
        injections: vec![Injection {
            fraction: 0.05,
            start: event_start(),
            duration_days: EVENT_DAYS,
            drop_iqr: 3.0,
            recovery: Recovery::Step,
        }],
        ..Default::default()
    }
}

fn train_config() -> TrainConfig {
    TrainConfig { batch_size: 128, learning_rate: 0.002, ..Default::default() }
}

struct Experiment {
    corpus: SynthCorpus,
    all: Dataset,
    train: Dataset,
    test: Dataset,
    model: ConditionalModel,
    global: GlobalBaseline,
    climatology: ClimatologyBaseline,
    train_secs: f64,
}

fn experiment() -> Experiment {
    let corpus = synth::generate(&corpus_config()).unwrap();
    let state = fit_preprocessor(&corpus.pixels).unwrap();
    let all = dataset::prepare(&state, &corpus.pixels, &corpus.observations).dataset;
    let mut order: Vec<usize> = (0..all.n_pixels()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
    let n_test = all.n_pixels() / 5;
    let (mut test_idx, mut train_idx) = (order[..n_test].to_vec(), order[n_test..].to_vec());
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let train = all.subset(&train_idx);
    let test = all.subset(&test_idx);
    let start = Instant::now();
    let model = train::fit(&train, &state, &train_config(), &LossConfig::default()).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let global = fit_global(&train.ndvi).unwrap();
    let climatology = fit_climatology(&train.t, &train.ndvi).unwrap();
    Experiment { corpus, all, train, test, model, global, climatology, train_secs }
}

fn model_predictions(m: &ConditionalModel, ds: &Dataset) -> (Vec<QuantileCurveSet>, Vec<[f64; 3]>) {
    let curves = m.predict(&ds.pixels).unwrap();
    let mut out = Vec::with_capacity(ds.n_observations());
    for (i, c) in curves.iter().enumerate() {
        out.extend(ds.observation_range(i).map(|j| c.values_unchecked(ds.t[j])));
    }
    (curves, out)
}

fn baseline_exactness(e: &Experiment) -> Check {
    let obs = Observations::new(&e.train.t, &e.train.ndvi).unwrap();
    let pred = vec![e.global.quantiles; obs.len()];
    let r = metrics::evaluate("global", &pred, "global", &pred, &obs).unwrap();
    let tol = 1.0 / obs.len() as f64;
    let cov_ok = (0..3).all(|q| (r.coverage[q] - QUANTILES[q]).abs() <= tol);
    (
        r.d2 == [Some(0.0); 3] && cov_ok,
        format!("D² {:?}, coverage {:?} (±{tol:.1e}), n = {}", r.d2, r.coverage, obs.len()),
    )
}

fn coverage(e: &Experiment, pred: &[[f64; 3]]) -> Check {
    let obs = Observations::new(&e.test.t, &e.test.ndvi).unwrap();
    let c = metrics::coverage(pred, &obs).unwrap();
    let ok = (0..3).all(|q| (c[q] - QUANTILES[q]).abs() <= 0.02);
    let big_enough = e.all.n_pixels() >= 2000 && e.all.n_observations() >= 200_000;
    (
        ok && big_enough,
        format!(
            "held-out coverage {:.4} / {:.4} / {:.4} on {} pixels, {} observations; corpus {} observations, training {:.0}s",
            c[0],
            c[1],
            c[2],
            e.test.n_pixels(),
            e.test.n_observations(),
            e.all.n_observations(),
            e.train_secs
        ),
    )
}

fn skill_ordering(e: &Experiment, pred: &[[f64; 3]]) -> Check {
    let obs = Observations::new(&e.test.t, &e.test.ndvi).unwrap();
    let glob = vec![e.global.quantiles; obs.len()];
    let clim: Vec<[f64; 3]> = e.test.t.iter().map(|&t| e.climatology.predict(t)).collect();
    let pm = metrics::pinball(pred, &obs).unwrap();
    let pc = metrics::pinball(&clim, &obs).unwrap();
    let pg = metrics::pinball(&glob, &obs).unwrap();
    let r = metrics::evaluate("conditional", pred, "global", &glob, &obs).unwrap();
    let d2: Vec<f64> = r.d2.iter().map(|d| d.unwrap_or(f64::NAN)).collect();
    let ordered = (0..3).all(|q| pm[q] < pc[q] && pc[q] < pg[q]);
    let skilled = d2.iter().all(|&d| d > 0.3);
    (
        ordered && skilled,
        format!(
            "pinball model {:.4}/{:.4}/{:.4} < clim {:.4}/{:.4}/{:.4} < global {:.4}/{:.4}/{:.4}; D² vs global {:.3}/{:.3}/{:.3}",
            pm[0], pm[1], pm[2], pc[0], pc[1], pc[2], pg[0], pg[1], pg[2], d2[0], d2[1], d2[2]
        ),
    )
}

fn non_crossing(curves: &[QuantileCurveSet]) -> Check {
    let grid = crossing_grid(52);
    let (mut bad, mut total) = (0usize, 0usize);
    for c in curves {
        for &t in &grid {
            let [a, b, d] = c.values_unchecked(t);
            total += 1;
            bad += usize::from(a - b > 1e-3 || b - d > 1e-3);
        }
    }
    let frac = bad as f64 / total as f64;
    (frac < 0.01, format!("{bad} of {total} (pixel, week) points cross by more than 1e-3 ({:.3}%)", 100.0 * frac))
}

fn periodicity(curves: &[QuantileCurveSet]) -> Check {
    let med = [0, 1, 2].map(|q| {
        let mut gaps: Vec<f64> = curves
            .iter()
            .map(|c| (c.curves[q].value_unchecked(0.0) - c.curves[q].value_unchecked(1.0)).abs())
            .collect();
        gaps.sort_by(f64::total_cmp);
        forest_browning::baselines::quantile_sorted(&gaps, 0.5)
    });
    (med.iter().all(|&m| m < 0.02), format!("median |f(0) - f(1)| {:.2e} / {:.2e} / {:.2e}", med[0], med[1], med[2]))
}

fn injected_truth(corpus: &SynthCorpus) -> HashMap<(u64, NaiveDate), bool> {
    corpus
        .observations
        .iter()
        .zip(&corpus.truth.observations)
        .map(|(o, t)| ((o.pixel_id, o.date), t.injected))
        .collect()
}

fn recall_counts<'a>(
    records: impl Iterator<Item = &'a AnomalyRecord>,
    truth: &HashMap<(u64, NaiveDate), bool>,
) -> (f64, f64, [usize; 4]) {
    let mut n = [0usize; 4];
    for r in records.filter(|r| r.usable()) {
        let k = if truth[&(r.pixel_id, r.date)] { 0 } else { 2 };
        n[k] += 1;
        n[k + 1] += usize::from(r.is_negative_anomaly);
    }
    (n[1] as f64 / n[0] as f64, n[3] as f64 / n[2] as f64, n)
}

fn recall(records: &[AnomalyRecord], truth: &HashMap<(u64, NaiveDate), bool>, held_out: &Dataset) -> Check {
    let (rec, fal, n) = recall_counts(records.iter(), truth);
    let ids: std::collections::HashSet<u64> = held_out.pixels.iter().map(|p| p.pixel_id).collect();
    let (hrec, hfal, _) = recall_counts(records.iter().filter(|r| ids.contains(&r.pixel_id)), truth);
    (
        rec >= 0.9 && fal <= 0.02,
        format!(
            "recall {rec:.4} ({}/{} in-window), false-flag rate {fal:.4} ({}/{}); held-out pixels only: {hrec:.4} / {hfal:.4}",
            n[1], n[0], n[3], n[2]
        ),
    )
}

fn case_shape(records: &[AnomalyRecord], corpus: &SynthCorpus) -> Check {
    let affected = corpus.truth.injected_pixels[0].clone();
    let hit: std::collections::HashSet<u64> = affected.iter().copied().collect();
    let control: Vec<u64> = corpus.pixels.iter().map(|p| p.pixel_id).filter(|id| !hit.contains(id)).collect();
    let s = anomaly::case_study(records, &affected, &control).unwrap();
    let start = event_start();
    let end = start + chrono::Days::new(u64::from(EVENT_DAYS));
    let pre_from = start - chrono::Days::new(u64::from(EVENT_DAYS));
    let pre_max =
        s.affected.iter().filter(|p| p.date >= pre_from && p.date < start).map(|p| p.fraction).fold(0.0, f64::max);
    let (mut flagged, mut usable) = (0.0, 0usize);
    for p in s.affected.iter().filter(|p| p.date >= start && p.date < end) {
        flagged += p.fraction * p.usable as f64;
        usable += p.usable;
    }
    let in_window = flagged / usable as f64;
    let control_max = s.control.iter().map(|p| p.fraction).fold(0.0, f64::max);
    (
        pre_max <= 0.05 && in_window >= 0.9 && control_max <= 0.05,
        format!(
            "affected: max {pre_max:.3} over the {EVENT_DAYS} days before the event, {in_window:.3} in-window; control max {control_max:.3} over {} dates ({} affected, {} control pixels)",
            s.control.len(),
            affected.len(),
            control.len()
        ),
    )
}

// -------------------------------------------------------------- determinism

fn browning(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_browning")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(root: &Path, threads: &str) -> Vec<(String, Vec<u8>)> {
    let s = |rel: &str| root.join(rel).to_str().unwrap().to_string();
    let common = ["--threads", threads, "--seed", "17", "-q"];
    let with = |mut v: Vec<String>| {
        v.extend(common.iter().map(|s| s.to_string()));
        v
    };
    let run = |v: Vec<String>| browning(&v.iter().map(String::as_str).collect::<Vec<_>>());
    run(with(vec![
        "synth".into(),
        "--out".into(),
        s("synth"),
        "--set".into(),
        "synth.n_pixels=300".into(),
        "--set".into(),
        "synth.years=2".into(),
    ]));
    run(with(vec![
        "prep".into(),
        "--pixels".into(),
        s("synth/pixels.tsv"),
        "--observations".into(),
        s("synth/observations.tsv"),
        "--out".into(),
        s("prep"),
    ]));
    let data = |cmd: &str, out: &str| {
        vec![
            cmd.to_string(),
            "--features".into(),
            s("prep/features.tsv"),
            "--ndvi".into(),
            s("prep/ndvi.tsv"),
            "--out".into(),
            s(out),
        ]
    };
    let mut fit = data("fit", "fit");
    fit.extend(["--preprocessor".into(), s("prep/preprocessor.json"), "--set".into(), "train.epochs=3".into()]);
    run(with(fit));
    let mut g = data("fit", "global");
    g.extend(["--kind".into(), "global".into()]);
    run(with(g));
    let mut sc = data("score", "score");
    sc.extend(["--checkpoint".into(), s("fit/checkpoint.json")]);
    run(with(sc));
    let mut m = data("metrics", "metrics");
    m.extend(["--checkpoint".into(), s("fit/checkpoint.json"), "--reference".into(), s("global/checkpoint.json")]);
    run(with(m));

    let mut files = Vec::new();
    for dir in ["synth", "prep", "fit", "global", "score", "metrics"] {
        let mut names: Vec<PathBuf> = std::fs::read_dir(root.join(dir)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            // manifests record paths and thread counts
            if p.file_name().unwrap() != "manifest.json" {
                files.push((format!("{dir}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap()));
            }
        }
    }
    files
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let a = pipeline(&dir.path().join("a"), "1");
    let b = pipeline(&dir.path().join("b"), "1");
    let c = pipeline(&dir.path().join("c"), "4");
    let diff = |x: &[(String, Vec<u8>)], y: &[(String, Vec<u8>)]| -> Vec<String> {
        if x.len() != y.len() {
            return vec!["file sets differ".into()];
        }
        x.iter().zip(y).filter(|(p, q)| p != q).map(|(p, _)| p.0.clone()).collect()
    };
    let same_seed = diff(&a, &b);
    let threads = diff(&a, &c);
    (
        same_seed.is_empty() && threads.is_empty(),
        format!(
            "{} output files; --threads 1 rerun differs in {:?}; --threads 4 differs in {:?}",
            a.len(),
            same_seed,
            threads
        ),
    )
}

fn main() {
    let mut report = Report { failed: 0 };
    report.run("gradient correctness", gradient_check);
    report.run("curve oracle equivalence", curve_oracle);
    report.run("loader property", loader_property);
    report.run("determinism", determinism);

    let start = Instant::now();
    let e = experiment();
    println!("     synthetic corpus and training ready ({:.1}s)", start.elapsed().as_secs_f64());
    let (test_curves, test_pred) = model_predictions(&e.model, &e.test);
    let all_curves = e.model.predict(&e.all.pixels).unwrap();
    report.run("baseline exactness", || baseline_exactness(&e));
    report.run("synthetic recovery: coverage", || coverage(&e, &test_pred));
    report.run("synthetic recovery: skill ordering", || skill_ordering(&e, &test_pred));
    report.run("non-crossing", || non_crossing(&test_curves));
    report.run("periodicity", || periodicity(&test_curves));
    let records = anomaly::score_dataset(&e.all, &all_curves, &AnomalyConfig::default()).unwrap();
    let truth = injected_truth(&e.corpus);
    report.run("anomaly detection recall", || recall(&records, &truth, &e.test));
    report.run("case-study shape", || case_shape(&records, &e.corpus));

    if report.failed > 0 {
        println!("{} criteria failed", report.failed);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
