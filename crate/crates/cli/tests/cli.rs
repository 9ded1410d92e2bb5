use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_SYNTH: [&str; 4] = ["--set", "synth.n_pixels=40", "--set", "synth.years=1"];
const SMALL_NET: [&str; 10] = [
    "--set",
    "train.epochs=2",
    "--set",
    "train.hidden=12",
    "--set",
    "train.n_layers=3",
    "--set",
    "train.skip_into=2",
    "--set",
    "train.batch_size=16",
];

fn browning(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_browning")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = browning(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Corpus {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let synth = root.join("synth");
        let mut args = vec!["synth", "--out", p(&synth)];
        args.extend(SMALL_SYNTH);
        ok(&args);
        ok(&[
            "prep",
            "--pixels",
            p(&synth.join("pixels.tsv")),
            "--observations",
            p(&synth.join("observations.tsv")),
            "--out",
            p(&root.join("prep")),
        ]);
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn fit(&self, kind: &str, out: &str) {
        let (f, n, pre, o) = (
            self.path("prep/features.tsv"),
            self.path("prep/ndvi.tsv"),
            self.path("prep/preprocessor.json"),
            self.path(out),
        );
        let mut args = vec!["fit", "--kind", kind, "--features", p(&f), "--ndvi", p(&n), "--out", p(&o)];
        if kind == "conditional" {
            args.extend(["--preprocessor", p(&pre)]);
            args.extend(SMALL_NET);
        }
        ok(&args);
    }
}

fn header(path: &Path, command: &str) -> bool {
    let text = std::fs::read_to_string(path).unwrap();
    text.starts_with(&format!("# browning schema=1 command={command}\n"))
}

#[test]
fn pipeline_writes_all_artifacts() {
    let c = Corpus::new();
    c.fit("conditional", "model");
    c.fit("global", "global");
    c.fit("climatology", "clim");
    ok(&[
        "metrics",
        "--checkpoint",
        p(&c.path("model/checkpoint.json")),
        "--reference",
        p(&c.path("global/checkpoint.json")),
        "--climatology",
        p(&c.path("clim/checkpoint.json")),
        "--features",
        p(&c.path("prep/features.tsv")),
        "--ndvi",
        p(&c.path("prep/ndvi.tsv")),
        "--out",
        p(&c.path("metrics")),
    ]);
    for (file, cmd) in [
        ("synth/pixels.tsv", "synth"),
        ("synth/observations.tsv", "synth"),
        ("synth/truth_curves.tsv", "synth"),
        ("synth/truth_observations.tsv", "synth"),
        ("synth/injected_pixels.tsv", "synth"),
        ("prep/features.tsv", "prep"),
        ("prep/ndvi.tsv", "prep"),
        ("prep/prep_summary.tsv", "prep"),
        ("prep/issues.tsv", "prep"),
        ("model/training_log.tsv", "fit"),
        ("metrics/summary.tsv", "metrics"),
        ("metrics/per_day.tsv", "metrics"),
    ] {
        assert!(header(&c.path(file), cmd), "{file}");
    }
    for dir in ["synth", "prep", "model", "global", "clim", "metrics"] {
        assert!(c.path(dir).join("manifest.json").exists(), "{dir}");
    }
    let ck = std::fs::read_to_string(c.path("model/checkpoint.json")).unwrap();
    assert!(ck.contains("\"schema_version\": 1") && ck.contains("\"command\": \"fit\""));
    let log = std::fs::read_to_string(c.path("model/training_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2 + 2);
}

#[test]
fn global_against_itself_has_zero_skill() {
    let c = Corpus::new();
    c.fit("global", "global");
    let g = c.path("global/checkpoint.json");
    ok(&[
        "metrics",
        "--checkpoint",
        p(&g),
        "--reference",
        p(&g),
        "--features",
        p(&c.path("prep/features.tsv")),
        "--ndvi",
        p(&c.path("prep/ndvi.tsv")),
        "--out",
        p(&c.path("m")),
    ]);
    let text = std::fs::read_to_string(c.path("m/summary.tsv")).unwrap();
    let cols: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
    for row in text.lines().skip(2) {
        let f: Vec<&str> = row.split('\t').collect();
        for q in ["d2_q25", "d2_q50", "d2_q75"] {
            let i = cols.iter().position(|c| *c == q).unwrap();
            assert_eq!(f[i], "0", "{q} in {row}");
        }
    }
}

#[test]
fn score_on_empty_dataset_writes_header_only() {
    let c = Corpus::new();
    c.fit("global", "global");
    let features = std::fs::read_to_string(c.path("prep/features.tsv")).unwrap();
    let ndvi = std::fs::read_to_string(c.path("prep/ndvi.tsv")).unwrap();
    let keep_header = |t: &str| t.lines().take(2).map(|l| format!("{l}\n")).collect::<String>();
    std::fs::write(c.path("empty_features.tsv"), keep_header(&features)).unwrap();
    std::fs::write(c.path("empty_ndvi.tsv"), keep_header(&ndvi)).unwrap();
    ok(&[
        "score",
        "--checkpoint",
        p(&c.path("global/checkpoint.json")),
        "--features",
        p(&c.path("empty_features.tsv")),
        "--ndvi",
        p(&c.path("empty_ndvi.tsv")),
        "--out",
        p(&c.path("score")),
    ]);
    let text = std::fs::read_to_string(c.path("score/records.tsv")).unwrap();
    assert_eq!(text, "# browning schema=1 command=score\npixel_id\tdate\tndvi\tscore\tflag\tf25\tf75\tpositive_flag\n");
}

fn error_code(out: &Output) -> (i32, serde_json::Value) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error line");
    (out.status.code().unwrap(), serde_json::from_str(line).expect("json error line"))
}

#[test]
fn failures_have_distinct_exit_codes() {
    let c = Corpus::new();
    c.fit("conditional", "model");
    let ck = c.path("model/checkpoint.json");
    let ndvi = c.path("prep/ndvi.tsv");

    // missing column
    let obs = std::fs::read_to_string(c.path("prep/ndvi.tsv")).unwrap();
    std::fs::write(c.path("no_ndvi.tsv"), obs.replace("\tndvi\n", "\tvalue\n")).unwrap();
    let out = browning(&[
        "score",
        "--checkpoint",
        p(&ck),
        "--features",
        p(&c.path("prep/features.tsv")),
        "--ndvi",
        p(&c.path("no_ndvi.tsv")),
        "--out",
        p(&c.path("x")),
    ]);
    let (code, err) = error_code(&out);
    assert_eq!(code, 4);
    assert_eq!(err["error"]["kind"], "missing_column");

    // schema version
    let feats = std::fs::read_to_string(c.path("prep/features.tsv")).unwrap();
    std::fs::write(c.path("v2.tsv"), feats.replacen("schema=1", "schema=2", 1)).unwrap();
    let out = browning(&[
        "score",
        "--checkpoint",
        p(&ck),
        "--features",
        p(&c.path("v2.tsv")),
        "--ndvi",
        p(&ndvi),
        "--out",
        p(&c.path("x")),
    ]);
    assert_eq!(error_code(&out).0, 5);

    // dimension: drop one continuous feature column
    let narrow: String = feats
        .lines()
        .map(|l| {
            if l.starts_with('#') {
                format!("{l}\n")
            } else {
                let mut f: Vec<&str> = l.split('\t').collect();
                f.remove(1);
                format!("{}\n", f.join("\t"))
            }
        })
        .collect();
    std::fs::write(c.path("narrow.tsv"), narrow).unwrap();
    let out = browning(&[
        "score",
        "--checkpoint",
        p(&ck),
        "--features",
        p(&c.path("narrow.tsv")),
        "--ndvi",
        p(&ndvi),
        "--out",
        p(&c.path("x")),
    ]);
    let (code, err) = error_code(&out);
    assert_eq!(code, 6, "{err}");

    // io
    let out = browning(&[
        "score",
        "--checkpoint",
        p(&c.path("nope.json")),
        "--features",
        p(&c.path("narrow.tsv")),
        "--ndvi",
        p(&ndvi),
        "--out",
        p(&c.path("x")),
    ]);
    assert_eq!(error_code(&out).0, 3);

    // invalid configuration
    let out = browning(&["synth", "--out", p(&c.path("y")), "--set", "synth.dropout=2"]);
    assert_eq!(error_code(&out).0, 7);
    let out = browning(&["synth", "--out", p(&c.path("y")), "--set", "synth.unknown=1"]);
    assert_eq!(error_code(&out).0, 7);

    // usage
    assert_eq!(browning(&["fit"]).status.code(), Some(2));
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "synth.n_pixels = 7\nsynth.years = 1\nsynth.cadence_days = 30\n").unwrap();
    let out = dir.path().join("s");
    ok(&["synth", "--config", p(&conf), "--set", "synth.n_pixels=9", "--seed", "4", "--out", p(&out)]);
    let pixels = std::fs::read_to_string(out.join("pixels.tsv")).unwrap();
    assert_eq!(pixels.lines().count(), 2 + 9);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["synth"]["n_pixels"], 9);
    assert_eq!(manifest["config"]["synth"]["cadence_days"], 30);
    assert_eq!(manifest["config"]["synth"]["seed"], 4);
}

#[test]
fn rerun_is_byte_identical() {
    let a = Corpus::new();
    let b = Corpus::new();
    a.fit("conditional", "model");
    b.fit("conditional", "model");
    for f in [
        "synth/observations.tsv",
        "prep/features.tsv",
        "prep/ndvi.tsv",
        "model/checkpoint.json",
        "model/training_log.tsv",
    ] {
        assert_eq!(std::fs::read(a.path(f)).unwrap(), std::fs::read(b.path(f)).unwrap(), "{f}");
    }
}

#[test]
fn aggregate_and_case_outputs() {
    let c = Corpus::new();
    c.fit("climatology", "clim");
    ok(&[
        "score",
        "--checkpoint",
        p(&c.path("clim/checkpoint.json")),
        "--features",
        p(&c.path("prep/features.tsv")),
        "--ndvi",
        p(&c.path("prep/ndvi.tsv")),
        "--out",
        p(&c.path("score")),
    ]);
    let records = c.path("score/records.tsv");
    ok(&[
        "aggregate",
        "--records",
        p(&records),
        "--dates",
        "2018-05-31,2018-06-05",
        "--pixels",
        p(&c.path("synth/pixels.tsv")),
        "--out",
        p(&c.path("agg")),
    ]);
    for f in ["daily.tsv", "pixel_fraction.tsv", "histogram.tsv", "snapshot.tsv"] {
        assert!(header(&c.path("agg").join(f), "aggregate"), "{f}");
    }
    let daily = std::fs::read_to_string(c.path("agg/daily.tsv")).unwrap();
    assert_eq!(daily.lines().count(), 2 + 366);
    let grid = std::fs::read_to_string(c.path("agg/snapshot_grid.txt")).unwrap();
    assert!(grid.contains('.') || grid.contains('#'));

    std::fs::write(c.path("a.txt"), "pixel_id\n0\n1\n2\n").unwrap();
    std::fs::write(c.path("b.txt"), "# control\n10\n11\n").unwrap();
    ok(&[
        "case",
        "--records",
        p(&records),
        "--affected",
        p(&c.path("a.txt")),
        "--control",
        p(&c.path("b.txt")),
        "--out",
        p(&c.path("case")),
    ]);
    let text = std::fs::read_to_string(c.path("case/case_study.tsv")).unwrap();
    assert!(text.lines().skip(2).any(|l| l.starts_with("affected\t")));
    assert!(text.lines().skip(2).any(|l| l.starts_with("control\t")));
    std::fs::write(c.path("empty.txt"), "").unwrap();
    let out = browning(&[
        "case",
        "--records",
        p(&records),
        "--affected",
        p(&c.path("empty.txt")),
        "--control",
        p(&c.path("b.txt")),
        "--out",
        p(&c.path("case2")),
    ]);
    assert_eq!(out.status.code(), Some(7));
}
