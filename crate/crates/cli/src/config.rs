//! Flat `key=value` run configuration: defaults, then a config file, then
//! command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "APFCN_OUT_DIR";
pub const FALLBACK_OUT_DIR: &str = "apfcn-out";
/// Name of the resolved-configuration file written next to every run's outputs.
pub const RESOLVED_NAME: &str = "run.conf";

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
    pub flag: bool,
}

const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        flag: false,
    }
}

const fn flag(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help,
        flag: true,
    }
}

const OUT: Key = key("out", None, "output directory (default: $APFCN_OUT_DIR or ./apfcn-out)");

pub const GEN_KEYS: &[Key] = &[
    OUT,
    key("samples_per_class", Some("100"), "signals generated per class"),
    key("classes", Some("24"), "number of classes"),
    key("t", Some("200"), "time steps per signal"),
    key("l", Some("12"), "leads per signal"),
    key("noise_std", Some("0.05"), "standard deviation of additive noise (mV)"),
    key("jitter", Some("10"), "maximum time shift in steps"),
    key("seed", Some("0"), "random seed"),
    key("active_leads", Some(""), "comma-separated leads carrying signal (names or indices; empty = all)"),
    flag("noise_on_inactive", "true", "add noise to leads outside active_leads"),
    key("min_row_distance", Some("1.0"), "minimum distance between class projection rows"),
];

pub const TRAIN_KEYS: &[Key] = &[
    key("data", None, "dataset directory"),
    OUT,
    key("variant", Some("image2d"), "stacked1d | multichannel1d | image2d"),
    key("filters", Some(""), "comma-separated filter counts per layer (empty = defaults)"),
    key("epochs", Some("100"), "maximum epochs"),
    key("batch_size", Some("32"), "minibatch size"),
    key("lr", Some("0.001"), "learning rate"),
    key("optimizer", Some("adam"), "adam | sgd"),
    key("momentum", Some("0"), "SGD momentum"),
    key("patience", Some("15"), "early-stopping patience in epochs (0 = off)"),
    key("split", Some("0.75,0.15,0.10"), "train,val,test ratios"),
    key("seed", Some("0"), "seed for splitting, initialization and shuffling"),
    key("fine_tune_epochs", Some("0"), "epochs of dense-head fine-tuning after training (0 = skip)"),
    key("fine_tune_lr", Some("0.001"), "learning rate for fine-tuning"),
];

pub const EXPLAIN_KEYS: &[Key] = &[
    key("data", None, "dataset directory"),
    key("model", None, "checkpoint file"),
    OUT,
    key("split", Some(""), "split file (default: split.csv next to the checkpoint)"),
    key("method", Some("guided-gradcam"), "guided-backprop | gradcam | guided-gradcam"),
    flag("abs", "false", "absolute values of guided grad-cam scores"),
    flag("interpolate", "false", "stretch coarse grad-cam maps onto the input grid"),
    key("samples", Some(""), "comma-separated sample indices (default: correctly classified test samples)"),
];

pub const CLUSTER_KEYS: &[Key] = &[
    key("data", None, "dataset directory"),
    OUT,
    key("classes", Some(""), "comma-separated classes to cluster (empty = all)"),
    key("k", Some("2,3,4"), "candidate cluster counts"),
    key("seed", Some("0"), "seed for medoid initialization"),
    key("window", Some(""), "Sakoe-Chiba band half-width (empty = unconstrained)"),
];

pub const LEAD_IMPORTANCE_KEYS: &[Key] = &[
    key("data", None, "dataset directory"),
    key("model", None, "image2d checkpoint file"),
    OUT,
    key("split", Some(""), "split file (default: split.csv next to the checkpoint)"),
];

pub const COMPARE_KEYS: &[Key] = &[
    key("predictions", None, "classifier predictions CSV (sample,label,predicted)"),
    key("baseline", None, "baseline CSV (sample,scheme,region) or another predictions CSV"),
    key("scheme", Some("easy-wpw"), "easy-wpw | arruda"),
    OUT,
];

pub fn keys_for(command: &str) -> &'static [Key] {
    match command {
        "gen" => GEN_KEYS,
        "train" => TRAIN_KEYS,
        "explain" => EXPLAIN_KEYS,
        "cluster" => CLUSTER_KEYS,
        "lead-importance" => LEAD_IMPORTANCE_KEYS,
        "compare" => COMPARE_KEYS,
        _ => &[],
    }
}

/// Key name as typed on the command line.
pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parse `key=value` lines; `#` starts a comment.
pub fn parse_file(text: &str, path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Validation(format!("{}:{}: expected key=value, got {line:?}", path.display(), n + 1))
        })?;
        out.push((normalize(k), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(
        command: &str,
        file: Option<&Path>,
        overrides: &[(String, String)],
        env_out: Option<String>,
    ) -> Result<Self, CliError> {
        let keys = keys_for(command);
        let known = |k: &str| keys.iter().any(|key| key.name == k);
        let mut values: BTreeMap<String, String> = keys
            .iter()
            .filter_map(|k| k.default.map(|d| (k.name.to_string(), d.to_string())))
            .collect();
        if known("out") {
            values.insert("out".into(), env_out.unwrap_or_else(|| FALLBACK_OUT_DIR.into()));
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("cannot read config file {}: {e}", path.display())))?;
            for (k, v) in parse_file(&text, path)? {
                if k == "command" {
                    if v != command {
                        return Err(CliError::Validation(format!(
                            "config file {} is for command {v:?}, not {command:?}",
                            path.display()
                        )));
                    }
                    continue;
                }
                if !known(&k) {
                    return Err(CliError::Validation(format!(
                        "unknown key {k:?} in {} for command {command}",
                        path.display()
                    )));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in overrides {
            let k = normalize(k);
            if !known(&k) {
                return Err(CliError::Validation(format!("unknown option {k:?} for command {command}")));
            }
            values.insert(k, v.clone());
        }
        for k in keys {
            if !values.contains_key(k.name) {
                return Err(CliError::Validation(format!(
                    "missing required setting {} (--{} or config file)",
                    k.name,
                    flag_name(k.name)
                )));
            }
        }
        Ok(Self {
            command: command.to_string(),
            values,
        })
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.str(key))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T, CliError> {
        self.str(key)
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("{key}={:?} is not {what}", self.str(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        let v: f64 = self.parsed(key, "a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::Validation(format!("{key} must be finite")))
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        match self.str(key).trim() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::Validation(format!("{key}={other:?} is not a boolean"))),
        }
    }

    /// Comma-separated list; empty string gives an empty list.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.list(key)
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Validation(format!("{key}: {s:?} is not a non-negative integer")))
            })
            .collect()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        self.list(key)
            .iter()
            .map(|s| s.parse().map_err(|_| CliError::Validation(format!("{key}: {s:?} is not a number"))))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!("command={}\n", self.command);
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Write the resolved configuration into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::write(dir.join(RESOLVED_NAME), self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.conf");
        std::fs::write(&file, "# comment\nseed = 5\nnoise-std=0.2\n").unwrap();
        let cfg = RunConfig::resolve("gen", Some(&file), &[("seed".into(), "9".into())], Some("o".into())).unwrap();
        assert_eq!(cfg.str("seed"), "9");
        assert_eq!(cfg.str("noise_std"), "0.2");
        assert_eq!(cfg.str("out"), "o");
        assert_eq!(cfg.str("jitter"), "10");

        std::fs::write(&file, "bogus=1\n").unwrap();
        assert!(matches!(RunConfig::resolve("gen", Some(&file), &[], None), Err(CliError::Validation(_))));
        std::fs::write(&file, "command=train\n").unwrap();
        assert!(RunConfig::resolve("gen", Some(&file), &[], None).is_err());
    }

    #[test]
    fn required_keys() {
        assert!(RunConfig::resolve("train", None, &[], None).is_err());
        let cfg = RunConfig::resolve("train", None, &[("data".into(), "d".into())], None).unwrap();
        assert_eq!(cfg.str("out"), FALLBACK_OUT_DIR);
    }

    #[test]
    fn rendered_config_round_trips() {
        let cfg = RunConfig::resolve("cluster", None, &[("data".into(), "x".into())], Some("y".into())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cfg.write(dir.path()).unwrap();
        let again = RunConfig::resolve("cluster", Some(&dir.path().join(RESOLVED_NAME)), &[], None).unwrap();
        assert_eq!(again, cfg);
    }
}
