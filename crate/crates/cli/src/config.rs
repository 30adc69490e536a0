//! Run configuration: a JSON file, command-line overrides and defaults,
//! resolved into one validated [`RunConfig`].

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use msda_core::datagen::BenchmarkSpec;
use msda_core::pipeline::{AblationGrid, AblationKind, BaselineKind, TrainConfig};
use msda_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Output root used when neither the file nor `--out` names one.
pub const OUT_ENV: &str = "MSDA_LAB_OUT";
pub const DEFAULT_OUT: &str = "msda-runs";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Every effective setting of one command invocation. Training settings sit
/// at the top level next to the run-level keys.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset directory; `<out>/data` when absent.
    pub data_dir: Option<PathBuf>,
    pub benchmark: BenchmarkSpec,
    /// Target subject ids; empty means every target in the dataset.
    pub targets: Vec<String>,
    pub baselines: Vec<BaselineKind>,
    pub ablation: AblationKind,
    /// Threshold grid for the `τ` sweeps; the kind's default when absent.
    pub ablation_thresholds: Option<Vec<f64>>,
    /// `(γ, α, β)` grid for the weight ablation; the default when absent.
    pub ablation_weights: Option<Vec<[f64; 3]>>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

/// The run-level keys of [`RunConfig`].
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    seed: u64,
    out: PathBuf,
    #[serde(default)]
    data_dir: Option<PathBuf>,
    #[serde(default)]
    benchmark: BenchmarkSpec,
    #[serde(default)]
    targets: Vec<String>,
    #[serde(default = "all_baselines")]
    baselines: Vec<BaselineKind>,
    #[serde(default = "default_ablation")]
    ablation: AblationKind,
    #[serde(default)]
    ablation_thresholds: Option<Vec<f64>>,
    #[serde(default)]
    ablation_weights: Option<Vec<[f64; 3]>>,
}

fn all_baselines() -> Vec<BaselineKind> {
    BaselineKind::ALL.to_vec()
}

fn default_ablation() -> AblationKind {
    AblationKind::TauSsSweep
}

const RUN_KEYS: [&str; 9] = [
    "seed",
    "out",
    "data_dir",
    "benchmark",
    "targets",
    "baselines",
    "ablation",
    "ablation_thresholds",
    "ablation_weights",
];

/// Command-line values that replace file values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub tau_ss: Option<f64>,
    pub tau_pl: Option<f64>,
    pub epochs: Option<usize>,
    /// `(γ, α, β)`
    pub weights: Option<[f64; 3]>,
    pub targets: Option<Vec<String>>,
}

fn config_err(key: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        detail: detail.into(),
    }
}

/// Parses `γ,α,β` as given to `--weights`.
pub fn parse_weights(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(config_err("weights", format!("expected 3 comma-separated values, got `{s}`")));
    }
    let mut w = [0.0; 3];
    for (slot, p) in w.iter_mut().zip(parts) {
        *slot = p
            .parse()
            .map_err(|_| config_err("weights", format!("`{p}` is not a number")))?;
    }
    Ok(w)
}

impl RunConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn ablation_grid(&self) -> AblationGrid {
        match (self.ablation, &self.ablation_thresholds, &self.ablation_weights) {
            (AblationKind::TauSsSweep | AblationKind::TauPlSweep, Some(t), _) => AblationGrid::Thresholds(t.clone()),
            (AblationKind::LossWeights, _, Some(w)) => AblationGrid::Weights(w.clone()),
            (kind, _, _) => AblationGrid::default_for(kind),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.benchmark
            .validate()
            .map_err(|e| config_err("benchmark", e.to_string()))?;
        if let Some(t) = &self.ablation_thresholds {
            if let Some(v) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(config_err("ablation_thresholds", format!("{v} outside [0, 1]")));
            }
        }
        if let Some(w) = &self.ablation_weights {
            if w.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(config_err("ablation_weights", "weights must be finite and >= 0"));
            }
        }
        if self.baselines.is_empty() {
            return Err(config_err("baselines", "must name at least one baseline"));
        }
        Ok(())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| config_err("<resolved>", e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

/// Reads `file` (if any), applies `flags`, fills defaults and validates.
/// `env_out` is the value of [`OUT_ENV`], passed in so callers control it.
pub fn parse_config(file: Option<&Path>, flags: &Overrides, env_out: Option<&str>) -> Result<RunConfig> {
    let mut root = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(config_err("<root>", "config must be a JSON object")),
                Err(e) => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: Some(e.line()),
                        field: None,
                        detail: e.to_string(),
                    })
                }
            }
        }
        None => Map::new(),
    };
    check_keys(&root)?;
    apply_overrides(&mut root, flags)?;
    if !root.contains_key("seed") {
        return Err(config_err("seed", "required; pass --seed or set `seed` in the config file"));
    }
    if !root.contains_key("out") {
        root.insert("out".into(), Value::String(env_out.unwrap_or(DEFAULT_OUT).to_string()));
    }
    // The benchmark follows the run seed unless the file pins its own.
    let seed = root["seed"].clone();
    let bench = root
        .entry("benchmark")
        .or_insert_with(|| Value::Object(Map::new()));
    if let Value::Object(b) = bench {
        b.entry("seed").or_insert(seed);
    }
    let train_keys = train_keys();
    let (train, run): (Map<String, Value>, Map<String, Value>) =
        root.into_iter().partition(|(k, _)| train_keys.contains(k));
    let run: RunSection = from_map(run)?;
    let train: TrainConfig = from_map(train)?;
    let cfg = RunConfig {
        seed: run.seed,
        out: run.out,
        data_dir: run.data_dir,
        benchmark: run.benchmark,
        targets: run.targets,
        baselines: run.baselines,
        ablation: run.ablation,
        ablation_thresholds: run.ablation_thresholds,
        ablation_weights: run.ablation_weights,
        train,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn from_map<T: serde::de::DeserializeOwned>(map: Map<String, Value>) -> Result<T> {
    serde_path_to_error::deserialize(Value::Object(map)).map_err(|e| {
        let key = e.path().to_string();
        config_err(if key == "." { "<root>".to_string() } else { key }, e.into_inner().to_string())
    })
}

fn train_keys() -> BTreeSet<String> {
    match serde_json::to_value(TrainConfig::default()) {
        Ok(Value::Object(m)) => m.into_iter().map(|(k, _)| k).collect(),
        _ => BTreeSet::new(),
    }
}

fn check_keys(root: &Map<String, Value>) -> Result<()> {
    let mut known = train_keys();
    known.extend(RUN_KEYS.iter().map(|k| k.to_string()));
    match root.keys().find(|k| !known.contains(*k)) {
        Some(k) => Err(config_err(k.clone(), "unknown key")),
        None => Ok(()),
    }
}

fn apply_overrides(root: &mut Map<String, Value>, f: &Overrides) -> Result<()> {
    let num = |v: f64, key: &str| {
        serde_json::Number::from_f64(v)
            .map(Value::Number)
            .ok_or_else(|| config_err(key, format!("{v} is not a finite number")))
    };
    if let Some(s) = f.seed {
        root.insert("seed".into(), Value::from(s));
    }
    if let Some(o) = &f.out {
        root.insert("out".into(), Value::String(o.display().to_string()));
    }
    if let Some(t) = f.tau_ss {
        root.insert("tau_ss".into(), num(t, "tau_ss")?);
    }
    if let Some(t) = f.tau_pl {
        root.insert("tau_pl".into(), num(t, "tau_pl")?);
    }
    if let Some(e) = f.epochs {
        root.insert("epochs".into(), Value::from(e));
    }
    if let Some([unsup, agn, aw]) = f.weights {
        let w = root
            .entry("weights")
            .or_insert_with(|| Value::Object(Map::new()));
        let Value::Object(w) = w else {
            return Err(config_err("weights", "must be an object"));
        };
        w.insert("unsup".into(), num(unsup, "weights.unsup")?);
        w.insert("agn".into(), num(agn, "weights.agn")?);
        w.insert("aw".into(), num(aw, "weights.aw")?);
    }
    if let Some(t) = &f.targets {
        root.insert("targets".into(), Value::from(t.clone()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(json: &str, flags: &Overrides) -> Result<RunConfig> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, json).unwrap();
        parse_config(Some(&path), flags, None)
    }

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn tau_pl_is_read_from_the_file() {
        let c = parse_str(r#"{"seed":1,"tau_pl":0.95}"#, &Overrides::default()).unwrap();
        assert_eq!(c.train.tau_pl, 0.95);
    }

    #[test]
    fn out_of_range_tau_ss_names_the_key() {
        let e = parse_str(r#"{"seed":1,"tau_ss":1.5}"#, &Overrides::default()).unwrap_err();
        assert!(e.to_string().contains("tau_ss"), "{e}");
        assert_eq!(key_of(e), "tau_ss");
    }

    #[test]
    fn flags_override_file_values() {
        let flags = Overrides {
            epochs: Some(5),
            tau_ss: Some(0.3),
            weights: Some([2.0, 0.25, 0.0]),
            targets: Some(vec!["t01".into()]),
            ..Overrides::default()
        };
        let c = parse_str(r#"{"seed":1,"epochs":20,"weights":{"disentangle":0.5}}"#, &flags).unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.tau_ss, 0.3);
        assert_eq!(
            (c.train.weights.unsup, c.train.weights.agn, c.train.weights.aw),
            (2.0, 0.25, 0.0)
        );
        assert_eq!(c.train.weights.disentangle, 0.5);
        assert_eq!(c.targets, vec!["t01".to_string()]);
    }

    #[test]
    fn missing_seed_is_an_error() {
        let e = parse_str(r#"{"tau_pl":0.9}"#, &Overrides::default()).unwrap_err();
        assert_eq!(key_of(e), "seed");
        let c = parse_str(
            r#"{"tau_pl":0.9}"#,
            &Overrides {
                seed: Some(4),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(c.seed, 4);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        assert_eq!(key_of(parse_str(r#"{"seed":1,"tau":0.5}"#, &Overrides::default()).unwrap_err()), "tau");
        let nested = parse_str(r#"{"seed":1,"weights":{"gamma":1}}"#, &Overrides::default()).unwrap_err();
        assert!(key_of(nested).starts_with("weights"));
        let bench = parse_str(r#"{"seed":1,"benchmark":{"n_subjects":3}}"#, &Overrides::default()).unwrap_err();
        assert!(key_of(bench).starts_with("benchmark"));
    }

    #[test]
    fn wrong_types_name_the_key() {
        let e = parse_str(r#"{"seed":1,"epochs":"many"}"#, &Overrides::default()).unwrap_err();
        assert!(e.to_string().contains("epochs"), "{e}");
    }

    #[test]
    fn defaults_fill_everything_else() {
        let c = parse_config(
            None,
            &Overrides {
                seed: Some(3),
                ..Overrides::default()
            },
            Some("/tmp/elsewhere"),
        )
        .unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.out, PathBuf::from("/tmp/elsewhere"));
        assert_eq!(c.benchmark.seed, 3);
        assert_eq!(c.data_dir(), PathBuf::from("/tmp/elsewhere/data"));
        assert_eq!(c.baselines, BaselineKind::ALL.to_vec());
    }

    #[test]
    fn file_out_beats_the_environment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed":1,"out":"mine"}"#).unwrap();
        let c = parse_config(Some(&path), &Overrides::default(), Some("env")).unwrap();
        assert_eq!(c.out, PathBuf::from("mine"));
    }

    #[test]
    fn resolved_config_parses_back_to_itself() {
        let c = parse_str(r#"{"seed":9,"tau_ss":0.25,"out":"o"}"#, &Overrides::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = c.write_resolved(dir.path()).unwrap();
        let again = parse_config(Some(&path), &Overrides::default(), None).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn weights_flag_parsing() {
        assert_eq!(parse_weights("1, 0.5,0.1").unwrap(), [1.0, 0.5, 0.1]);
        assert!(parse_weights("1,2").is_err());
        assert!(parse_weights("1,x,2").is_err());
    }
}
