//! Run configuration: `section.field = value` lines from a file, then
//! `--set` overrides on top.

use std::path::Path;

use forest_browning::anomaly::AnomalyConfig;
use forest_browning::synth::SynthConfig;
use forest_browning::train::{LossConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::exit::CliError;

pub const SECTIONS: [&str; 4] = ["synth", "train", "loss", "anomaly"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub anomaly: AnomalyConfig,
}

/// Parses a value as JSON if it is valid JSON, else takes it as a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn split_assignment(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

fn section<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn rebuild<T: DeserializeOwned>(name: &str, v: Value) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Config(format!("[{name}] {e}")))
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut assignments: Vec<(String, String, String)> = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = split_assignment(line)
                    .ok_or_else(|| CliError::Config(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
                assignments.push((k.to_string(), v.to_string(), format!("{}:{}", path.display(), i + 1)));
            }
        }
        for o in overrides {
            let (k, v) =
                split_assignment(o).ok_or_else(|| CliError::Config(format!("--set `{o}`: expected key=value")))?;
            assignments.push((k.to_string(), v.to_string(), "--set".into()));
        }
        Self::default().apply(&assignments)
    }

    fn apply(&self, assignments: &[(String, String, String)]) -> Result<Self, CliError> {
        let mut doc = section(self);
        for (key, raw, origin) in assignments {
            let (sec, field) = key
                .split_once('.')
                .ok_or_else(|| CliError::Config(format!("{origin}: key `{key}` needs a section prefix")))?;
            if !SECTIONS.contains(&sec) {
                return Err(CliError::Config(format!("{origin}: unknown section `{sec}`")));
            }
            let obj = doc[sec].as_object_mut().expect("sections are objects");
            if !obj.contains_key(field) {
                return Err(CliError::Config(format!("{origin}: unknown key `{key}`")));
            }
            obj.insert(field.to_string(), parse_value(raw));
        }
        let get = |name: &str| doc[name].clone();
        Ok(Self {
            synth: rebuild("synth", get("synth"))?,
            train: rebuild("train", get("train"))?,
            loss: rebuild("loss", get("loss"))?,
            anomaly: rebuild("anomaly", get("anomaly"))?,
        })
    }

    /// The named sections as JSON, for the run manifest.
    pub fn sections(&self, names: &[&str]) -> Value {
        let doc = section(self);
        Value::Object(names.iter().map(|n| (n.to_string(), doc[*n].clone())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use forest_browning::synth::NoiseFamily;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, "# corpus\nsynth.n_pixels = 50\nsynth.noise = gaussian\ntrain.epochs=3\n").unwrap();
        let c = RunConfig::load(Some(&p), &["train.epochs=5".into(), "loss.lambda_nc=2.5".into()]).unwrap();
        assert_eq!(c.synth.n_pixels, 50);
        assert_eq!(c.synth.noise, NoiseFamily::Gaussian);
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.loss.lambda_nc, 2.5);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn injections_as_json() {
        let inj = r#"synth.injections=[{"fraction":0.05,"start":"2019-06-01","duration_days":60,"drop_iqr":3.0,"recovery":"step"}]"#;
        let c = RunConfig::load(None, &[inj.into()]).unwrap();
        assert_eq!(c.synth.injections.len(), 1);
        assert_eq!(c.synth.injections[0].duration_days, 60);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for bad in ["epochs=3", "train.epoch=3", "model.x=1", "train.epochs=many", "train.epochs"] {
            assert!(matches!(RunConfig::load(None, &[bad.into()]), Err(CliError::Config(_))), "{bad}");
        }
    }
}
