use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use chrono::NaiveDate;
use forest_browning::anomaly::{self, MergeRule};
use forest_browning::baselines::{fit_climatology, fit_global};
use forest_browning::checkpoint::{Checkpoint, Model};
use forest_browning::features::{fit_preprocessor, PreprocessorState, Rejection};
use forest_browning::io::{self as tables, fmt_f64, Table, TableWriter};
use forest_browning::metrics::{self, Observations};
use forest_browning::train::{self, EpochLog};
use forest_browning::{dataset, synth, Dataset};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::exit::CliError;

/// Shared state of one invocation.
pub struct Run {
    pub config: RunConfig,
    pub command: &'static str,
    pub threads: usize,
    pub verbosity: i8,
    pub started: Instant,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Run {
    pub fn log(&self, level: i8, msg: impl AsRef<str>) {
        if self.verbosity >= level {
            eprintln!("[{:>8.2}s] {}: {}", self.started.elapsed().as_secs_f64(), self.command, msg.as_ref());
        }
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<PathBuf> {
        if !path.exists() {
            return Err(CliError::Io(format!("{name} `{}` does not exist", path.display())).into());
        }
        self.inputs.insert(name.to_string(), path.display().to_string());
        Ok(path.to_path_buf())
    }

    fn output(&mut self, dir: &Path, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        dir.join(name)
    }

    /// Writes `manifest.json` next to the outputs.
    pub fn finish(&self, dir: &Path, sections: &[&str], extra: Value) -> Result<()> {
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "schema_version": tables::SCHEMA_VERSION,
            "threads": self.threads,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "config": self.config.sections(sections),
            "summary": extra,
        });
        write_json(&dir.join("manifest.json"), &manifest)
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn io_ctx(path: &Path) -> impl FnOnce(std::io::Error) -> anyhow::Error + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display())).into()
}

fn load_dataset(features: &Path, ndvi: &Path) -> Result<(Dataset, usize)> {
    let pixels = tables::read_features(features).context("reading features")?;
    let obs = tables::read_ndvi(ndvi).context("reading observations")?;
    Ok(Dataset::assemble(pixels, &obs))
}

fn load_preprocessor(path: &Path) -> Result<PreprocessorState> {
    let text = std::fs::read_to_string(path).map_err(io_ctx(path))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    if let Some(v) = value.get("schema_version").and_then(Value::as_u64) {
        if v != u64::from(tables::SCHEMA_VERSION) {
            return Err(forest_browning::error::FormatError::SchemaVersion {
                found: v as u32,
                expected: tables::SCHEMA_VERSION,
            }
            .into());
        }
    }
    let state = value.get("preprocessor").cloned().unwrap_or(value);
    Ok(serde_json::from_value(state).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?)
}

pub fn synth(run: &mut Run, out: &Path) -> Result<()> {
    out_dir(out)?;
    let cfg = run.config.synth.clone();
    run.log(1, format!("generating {} pixels over {} years", cfg.n_pixels, cfg.years));
    let corpus = synth::generate(&cfg)?;
    let cmd = run.command;
    tables::write_pixels(&run.output(out, "pixels.tsv"), cmd, &corpus.pixels)?;
    tables::write_observations(&run.output(out, "observations.tsv"), cmd, &corpus.observations)?;
    let ids: Vec<u64> = corpus.pixels.iter().map(|p| p.pixel_id).collect();
    tables::write_curve_params(&run.output(out, "truth_curves.tsv"), cmd, &ids, &corpus.truth.curves)?;

    let path = run.output(out, "truth_observations.tsv");
    let cols = ["pixel_id", "date", "clean", "noisy", "observed", "injected", "contaminated"];
    let mut w = TableWriter::new(create(&path)?, cmd, &cols).map_err(io_ctx(&path))?;
    for (o, t) in corpus.observations.iter().zip(&corpus.truth.observations) {
        w.row(&[
            o.pixel_id.to_string(),
            o.date.to_string(),
            fmt_f64(t.clean),
            fmt_f64(t.noisy),
            fmt_f64(t.observed),
            u8::from(t.injected).to_string(),
            u8::from(t.contaminated).to_string(),
        ])
        .map_err(io_ctx(&path))?;
    }
    w.finish().map_err(io_ctx(&path))?;

    let path = run.output(out, "injected_pixels.tsv");
    let mut w = TableWriter::new(create(&path)?, cmd, &["injection", "pixel_id"]).map_err(io_ctx(&path))?;
    for (k, ids) in corpus.truth.injected_pixels.iter().enumerate() {
        for id in ids {
            w.row(&[k.to_string(), id.to_string()]).map_err(io_ctx(&path))?;
        }
    }
    w.finish().map_err(io_ctx(&path))?;

    let summary = json!({ "pixels": corpus.pixels.len(), "observations": corpus.observations.len() });
    run.log(1, format!("wrote {} observations", corpus.observations.len()));
    run.finish(out, &["synth"], summary)
}

pub fn prep(run: &mut Run, pixels: &Path, observations: &Path, preprocessor: Option<&Path>, out: &Path) -> Result<()> {
    let pixels = run.input("pixels", pixels)?;
    let observations = run.input("observations", observations)?;
    out_dir(out)?;
    let raw_pixels = tables::read_pixels(&pixels).context("reading pixels")?;
    let raw_obs = tables::read_observations(&observations).context("reading observations")?;
    let state = match preprocessor {
        Some(p) => {
            let p = run.input("preprocessor", p)?;
            load_preprocessor(&p)?
        }
        None => fit_preprocessor(&raw_pixels)?,
    };
    let prepared = dataset::prepare(&state, &raw_pixels, &raw_obs);
    let ds = &prepared.dataset;
    let cmd = run.command;
    tables::write_features(&run.output(out, "features.tsv"), cmd, &ds.pixels)?;
    tables::write_ndvi(&run.output(out, "ndvi.tsv"), cmd, &ds.observations())?;
    write_json(
        &run.output(out, "preprocessor.json"),
        &json!({ "schema_version": tables::SCHEMA_VERSION, "command": cmd, "preprocessor": state }),
    )?;

    let path = run.output(out, "prep_summary.tsv");
    let mut w = TableWriter::new(create(&path)?, cmd, &["item", "count"]).map_err(io_ctx(&path))?;
    let mut rows: Vec<(String, usize)> = vec![
        ("pixels_in".into(), raw_pixels.len()),
        ("pixels_kept".into(), ds.n_pixels()),
        ("observations_in".into(), raw_obs.len()),
        ("observations_kept".into(), ds.n_observations()),
        ("orphan_observations".into(), prepared.orphans),
        ("pixel_issues".into(), prepared.pixel_issues.len()),
        ("observation_issues".into(), prepared.observation_issues.len()),
    ];
    for (k, r) in Rejection::ALL.iter().enumerate() {
        rows.push((format!("rejected_{}", r.name()), prepared.rejected[k]));
    }
    for (item, n) in &rows {
        w.row(&[item.clone(), n.to_string()]).map_err(io_ctx(&path))?;
    }
    w.finish().map_err(io_ctx(&path))?;

    let path = run.output(out, "issues.tsv");
    let mut w =
        TableWriter::new(create(&path)?, cmd, &["table", "index", "pixel_id", "message"]).map_err(io_ctx(&path))?;
    for (table, issues) in [("pixels", &prepared.pixel_issues), ("observations", &prepared.observation_issues)] {
        for i in issues {
            let id = i.pixel_id.map(|v| v.to_string()).unwrap_or_default();
            w.row(&[table.to_string(), i.index.to_string(), id, i.message.replace(['\t', '\n'], " ")])
                .map_err(io_ctx(&path))?;
        }
    }
    w.finish().map_err(io_ctx(&path))?;

    let summary: BTreeMap<String, usize> = rows.into_iter().collect();
    run.log(1, format!("{} pixels, {} observations kept", ds.n_pixels(), ds.n_observations()));
    run.finish(out, &[], json!(summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FitKind {
    Conditional,
    Global,
    Climatology,
}

pub struct FitArgs<'a> {
    pub features: &'a Path,
    pub ndvi: &'a Path,
    pub kind: FitKind,
    pub preprocessor: Option<&'a Path>,
    pub resume: Option<&'a Path>,
    pub pixel_set: Option<&'a Path>,
    pub out: &'a Path,
}

fn write_training_log(path: &Path, command: &str, log: &[EpochLog]) -> Result<()> {
    let cols =
        ["epoch", "pinball_q25", "pinball_q50", "pinball_q75", "periodicity", "crossing", "total", "learning_rate"];
    let mut w = TableWriter::new(create(path)?, command, &cols).map_err(io_ctx(path))?;
    for e in log {
        let mut row = vec![e.epoch.to_string()];
        row.extend(e.pinball.iter().map(|&v| fmt_f64(v)));
        row.extend([e.periodicity, e.crossing, e.total, e.learning_rate].map(fmt_f64));
        w.row(&row).map_err(io_ctx(path))?;
    }
    w.finish().map_err(io_ctx(path))?;
    Ok(())
}

pub fn fit(run: &mut Run, args: FitArgs) -> Result<()> {
    let features = run.input("features", args.features)?;
    let ndvi = run.input("ndvi", args.ndvi)?;
    out_dir(args.out)?;
    let (mut ds, orphans) = load_dataset(&features, &ndvi)?;
    if orphans > 0 {
        run.log(0, format!("warning: {orphans} observations have no pixel and were ignored"));
    }
    if let Some(p) = args.pixel_set {
        let p = run.input("pixel_set", p)?;
        let keep: HashSet<u64> = tables::read_pixel_set(&p)?.into_iter().collect();
        let idx: Vec<usize> = (0..ds.n_pixels()).filter(|&i| keep.contains(&ds.pixels[i].pixel_id)).collect();
        ds = ds.subset(&idx);
    }
    run.log(1, format!("{} pixels, {} observations", ds.n_pixels(), ds.n_observations()));
    let cmd = run.command;
    let (model, sections): (Model, &[&str]) = match args.kind {
        FitKind::Global => (Model::Global(fit_global(&ds.ndvi)?), &[]),
        FitKind::Climatology => (Model::Climatology(fit_climatology(&ds.t, &ds.ndvi)?), &[]),
        FitKind::Conditional => {
            let verbosity = run.verbosity;
            let started = run.started;
            let mut progress = |e: &EpochLog| {
                if verbosity >= 1 {
                    eprintln!(
                        "[{:>8.2}s] fit: epoch {:>3} loss {:.6} pinball {:.5}/{:.5}/{:.5} lr {:.2e}",
                        started.elapsed().as_secs_f64(),
                        e.epoch,
                        e.total,
                        e.pinball[0],
                        e.pinball[1],
                        e.pinball[2],
                        e.learning_rate
                    );
                }
            };
            let m = match args.resume {
                Some(ck) => {
                    let ck = run.input("resume", ck)?;
                    let Model::Conditional(prev) = Checkpoint::load(&ck)?.model else {
                        return Err(CliError::Invalid("--resume needs a conditional checkpoint".into()).into());
                    };
                    train::resume(&prev, &ds, run.config.train.epochs, &mut progress)?
                }
                None => {
                    let Some(pre) = args.preprocessor else {
                        return Err(CliError::Config("--preprocessor is required for --kind conditional".into()).into());
                    };
                    let pre = run.input("preprocessor", pre)?;
                    let state = load_preprocessor(&pre)?;
                    train::fit_with_progress(&ds, &state, &run.config.train, &run.config.loss, &mut progress)?
                }
            };
            (Model::Conditional(m), &["train", "loss"])
        }
    };
    let log = match &model {
        Model::Conditional(m) => m.training_log.clone(),
        _ => Vec::new(),
    };
    Checkpoint::new(cmd, model).save(&run.output(args.out, "checkpoint.json"))?;
    write_training_log(&run.output(args.out, "training_log.tsv"), cmd, &log)?;
    let summary = json!({
        "kind": format!("{:?}", args.kind).to_lowercase(),
        "pixels": ds.n_pixels(),
        "observations": ds.n_observations(),
        "final_loss": log.last().map(|e| e.total),
    });
    run.finish(args.out, sections, summary)
}

pub fn predict(run: &mut Run, checkpoint: &Path, features: &Path, grid_points: usize, out: &Path) -> Result<()> {
    let checkpoint = run.input("checkpoint", checkpoint)?;
    let features = run.input("features", features)?;
    out_dir(out)?;
    if grid_points < 2 {
        return Err(CliError::Config("--grid-points must be at least 2".into()).into());
    }
    let model = Checkpoint::load(&checkpoint)?.model;
    let pixels = tables::read_features(&features).context("reading features")?;
    let grid: Vec<f64> = (0..grid_points).map(|k| k as f64 / (grid_points - 1) as f64).collect();
    let values = model.predict_grid(&pixels, &grid)?;
    let ids: Vec<u64> = pixels.iter().map(|p| p.pixel_id).collect();
    let cmd = run.command;
    tables::write_curve_values(&run.output(out, "curves.tsv"), cmd, &ids, &grid, &values)?;
    if let Model::Conditional(m) = &model {
        let sets = m.predict(&pixels)?;
        tables::write_curve_params(&run.output(out, "params.tsv"), cmd, &ids, &sets)?;
    }
    run.finish(out, &[], json!({ "pixels": ids.len(), "grid_points": grid_points, "model_kind": model.kind() }))
}

pub fn score(run: &mut Run, checkpoint: &Path, features: &Path, ndvi: &Path, out: &Path) -> Result<()> {
    let checkpoint = run.input("checkpoint", checkpoint)?;
    let features = run.input("features", features)?;
    let ndvi = run.input("ndvi", ndvi)?;
    out_dir(out)?;
    let model = Checkpoint::load(&checkpoint)?.model;
    let (ds, _) = load_dataset(&features, &ndvi)?;
    let predicted = model.predict_dataset(&ds)?;
    let records = anomaly::score_predicted(&ds, &predicted, &run.config.anomaly);
    let path = run.output(out, "records.tsv");
    anomaly::write_records(create(&path)?, run.command, &records).map_err(io_ctx(&path))?;
    let flagged = records.iter().filter(|r| r.is_negative_anomaly).count();
    let usable = records.iter().filter(|r| r.usable()).count();
    run.log(1, format!("{flagged} of {usable} usable records flagged"));
    run.finish(out, &["anomaly"], json!({ "records": records.len(), "usable": usable, "flagged": flagged }))
}

pub struct MetricsArgs<'a> {
    pub checkpoint: &'a Path,
    pub reference: &'a Path,
    pub climatology: Option<&'a Path>,
    pub features: &'a Path,
    pub ndvi: &'a Path,
    pub out: &'a Path,
}

pub fn metrics(run: &mut Run, args: MetricsArgs) -> Result<()> {
    let checkpoint = run.input("checkpoint", args.checkpoint)?;
    let reference = run.input("reference", args.reference)?;
    let features = run.input("features", args.features)?;
    let ndvi = run.input("ndvi", args.ndvi)?;
    out_dir(args.out)?;
    let model = Checkpoint::load(&checkpoint)?.model;
    let refm = Checkpoint::load(&reference)?.model;
    let climatology = match args.climatology {
        Some(p) => {
            let p = run.input("climatology", p)?;
            Some(Checkpoint::load(&p)?.model)
        }
        None => matches!(refm, Model::Climatology(_)).then(|| refm.clone()),
    };
    let (ds, _) = load_dataset(&features, &ndvi)?;
    let obs = Observations::new(&ds.t, &ds.ndvi)?;
    let pm = model.predict_dataset(&ds)?;
    let pr = refm.predict_dataset(&ds)?;
    let mut report = metrics::evaluate(model.kind(), &pm, refm.kind(), &pr, &obs)?;
    let reference_row = metrics::evaluate(refm.kind(), &pr, refm.kind(), &pr, &obs)?;
    let cmd = run.command;
    if let Some(c) = &climatology {
        let pc = c.predict_dataset(&ds)?;
        let skill = metrics::per_day_skill(&pm, &pc, &obs)?;
        let path = run.output(args.out, "per_day.tsv");
        metrics::write_per_day(create(&path)?, cmd, &skill).map_err(io_ctx(&path))?;
        report.per_day = Some(skill);
    }
    let path = run.output(args.out, "summary.tsv");
    metrics::write_summary(create(&path)?, cmd, &[reference_row, report.clone()]).map_err(io_ctx(&path))?;
    write_json(&run.output(args.out, "report.json"), &report)?;
    run.finish(args.out, &[], json!({ "d2": report.d2, "coverage": report.coverage }))
}

fn parse_dates(list: &str) -> Result<Vec<NaiveDate>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| CliError::Config(format!("date `{s}`: {e}")).into()))
        .collect()
}

pub struct AggregateArgs<'a> {
    pub records: &'a Path,
    pub dates: Option<&'a str>,
    pub merge: MergeRule,
    pub pixels: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn aggregate(run: &mut Run, args: AggregateArgs) -> Result<()> {
    let records = run.input("records", args.records)?;
    out_dir(args.out)?;
    let records = anomaly::read_records(&Table::read(&records)?)?;
    let cmd = run.command;
    let daily = anomaly::daily_fraction(&records);
    let path = run.output(args.out, "daily.tsv");
    anomaly::write_daily(create(&path)?, cmd, &daily).map_err(io_ctx(&path))?;
    let px = anomaly::pixel_fraction(&records);
    let path = run.output(args.out, "pixel_fraction.tsv");
    anomaly::write_pixel_fractions(create(&path)?, cmd, &px).map_err(io_ctx(&path))?;
    let path = run.output(args.out, "histogram.tsv");
    anomaly::write_histogram(create(&path)?, cmd, &px).map_err(io_ctx(&path))?;

    if let Some(list) = args.dates {
        let dates = parse_dates(list)?;
        if dates.is_empty() {
            return Err(CliError::Config("--dates needs at least one date".into()).into());
        }
        let cells = anomaly::snapshot_map(&records, &dates, args.merge);
        let path = run.output(args.out, "snapshot.tsv");
        anomaly::write_snapshot(create(&path)?, cmd, &cells).map_err(io_ctx(&path))?;
        if let Some(p) = args.pixels {
            let p = run.input("pixels", p)?;
            let positions: HashMap<u64, (i64, i64)> =
                tables::read_pixels(&p)?.into_iter().filter_map(|r| r.position.map(|pos| (r.pixel_id, pos))).collect();
            let path = run.output(args.out, "snapshot_grid.txt");
            std::fs::write(&path, anomaly::render_grid(&cells, &positions)).map_err(io_ctx(&path))?;
        }
    }
    let summary = json!({
        "records": records.len(),
        "overall_fraction": daily.overall,
        "pixels": px.pixels.len(),
        "excluded_pixels": px.excluded,
    });
    write_json(&run.output(args.out, "aggregate.json"), &summary)?;
    run.finish(args.out, &[], summary)
}

pub fn case(run: &mut Run, records: &Path, affected: &Path, control: &Path, out: &Path) -> Result<()> {
    let records = run.input("records", records)?;
    let affected = run.input("affected", affected)?;
    let control = run.input("control", control)?;
    out_dir(out)?;
    let records = anomaly::read_records(&Table::read(&records)?)?;
    let a = tables::read_pixel_set(&affected)?;
    let c = tables::read_pixel_set(&control)?;
    let series = anomaly::case_study(&records, &a, &c)?;
    let path = run.output(out, "case_study.tsv");
    anomaly::write_case_study(create(&path)?, run.command, &series).map_err(io_ctx(&path))?;
    run.finish(
        out,
        &[],
        json!({ "affected_pixels": a.len(), "control_pixels": c.len(), "dates": series.affected.len() }),
    )
}
