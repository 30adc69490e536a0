//! One function per command. Each reads its prerequisites from the output
//! tree, writes its artifacts and its `resolved_config.json` under
//! `<out>/<command dir>`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msda_core::cotrain::{build_similarity_table, read_selection_report, select_sources, write_selection_report};
use msda_core::datagen::{generate_benchmark, read_dataset, write_dataset, Dataset, SubjectDataset};
use msda_core::model::{load_checkpoint, save_checkpoint, ModelBundle, CHECKPOINT_FILE};
use msda_core::pipeline::{
    ablate, adapt_selected, evaluate, export_embeddings, run_baseline, train_source_stage, write_ablation_csv,
    write_metrics_csv, write_results_csv, write_source_csv, ResultRow, SourceData, TargetData,
};
use msda_core::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainSource,
    Select,
    Adapt,
    Evaluate,
    Baseline,
    Ablate,
    ExportEmbeddings,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Self::GenData,
        Self::TrainSource,
        Self::Select,
        Self::Adapt,
        Self::Evaluate,
        Self::Baseline,
        Self::Ablate,
        Self::ExportEmbeddings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::TrainSource => "train-source",
            Self::Select => "select",
            Self::Adapt => "adapt",
            Self::Evaluate => "evaluate",
            Self::Baseline => "baseline",
            Self::Ablate => "ablate",
            Self::ExportEmbeddings => "export-embeddings",
        }
    }

    /// Directory under the output root holding this command's artifacts.
    pub fn dir(self, cfg: &RunConfig) -> PathBuf {
        match self {
            Self::GenData => cfg.data_dir(),
            Self::TrainSource => cfg.out.join("source"),
            Self::Select => cfg.out.join("select"),
            Self::Adapt => cfg.out.join("adapt"),
            Self::Evaluate => cfg.out.join("evaluate"),
            Self::Baseline => cfg.out.join("baseline"),
            Self::Ablate => cfg.out.join("ablate"),
            Self::ExportEmbeddings => cfg.out.join("embeddings"),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown command `{s}`"))
    }
}

/// Runs `cmd` and returns the files it wrote, resolved config first.
pub fn dispatch(cmd: Command, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cmd.dir(cfg);
    // Data must exist before the resolved config lands in its directory.
    let mut written = match cmd {
        Command::GenData => gen_data(cfg, &dir)?,
        _ => Vec::new(),
    };
    written.insert(0, cfg.write_resolved(&dir)?);
    let more = match cmd {
        Command::GenData => Vec::new(),
        Command::TrainSource => train_source(cfg, &dir)?,
        Command::Select => select(cfg, &dir)?,
        Command::Adapt => adapt(cfg, &dir)?,
        Command::Evaluate => evaluate_cmd(cfg, &dir)?,
        Command::Baseline => baseline(cfg, &dir)?,
        Command::Ablate => ablate_cmd(cfg, &dir)?,
        Command::ExportEmbeddings => embeddings(cfg, &dir)?,
    };
    written.extend(more);
    Ok(written)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn missing(path: PathBuf, hint: &str) -> Error {
    Error::MissingArtifact {
        path,
        hint: hint.into(),
    }
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let subjects = generate_benchmark(&cfg.benchmark)?;
    write_dataset(&subjects, cfg.benchmark.n_classes, Some(&cfg.benchmark), dir)?;
    log::info!("wrote {} subjects to {}", subjects.len(), dir.display());
    Ok(vec![dir.join(msda_core::datagen::MANIFEST_FILE)])
}

/// The dataset plus the run's source split and target splits.
struct Loaded {
    dataset: Dataset,
    sources: SourceData,
    targets: Vec<TargetData>,
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    let dir = cfg.data_dir();
    let manifest = dir.join(msda_core::datagen::MANIFEST_FILE);
    if !manifest.exists() {
        return Err(missing(manifest, "run `gen-data` first or set `data_dir`"));
    }
    let dataset = read_dataset(&dir)?;
    let sources = SourceData::split(&dataset.sources(), cfg.train.source_holdout, cfg.seed)?;
    let all: Vec<&SubjectDataset> = dataset.targets();
    let chosen: Vec<&SubjectDataset> = if cfg.targets.is_empty() {
        all
    } else {
        cfg.targets
            .iter()
            .map(|id| {
                all.iter().find(|s| &s.subject_id == id).copied().ok_or_else(|| Error::Config {
                    key: "targets".into(),
                    detail: format!("`{id}` is not a target subject of {}", dir.display()),
                })
            })
            .collect::<Result<_>>()?
    };
    if chosen.is_empty() {
        return Err(Error::Config {
            key: "targets".into(),
            detail: format!("{} has no target subjects", dir.display()),
        });
    }
    let targets = chosen
        .into_iter()
        .map(|t| TargetData::split(t, cfg.seed))
        .collect::<Result<_>>()?;
    Ok(Loaded {
        dataset,
        sources,
        targets,
    })
}

fn source_checkpoint(cfg: &RunConfig) -> Result<ModelBundle> {
    load_checkpoint(&Command::TrainSource.dir(cfg).join(CHECKPOINT_FILE))
}

fn adapted_checkpoint(cfg: &RunConfig, target: &str) -> Result<ModelBundle> {
    let path = Command::Adapt.dir(cfg).join(target).join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(missing(path, "run `adapt` first"));
    }
    load_checkpoint(&path)
}

fn train_source(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let data = load(cfg)?;
    let (bundle, report) = train_source_stage(&data.sources, data.dataset.n_classes(), &cfg.train, cfg.seed)?;
    let ck = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&bundle, &ck)?;
    let csv = dir.join("source_metrics.csv");
    write_source_csv(&report, &csv)?;
    Ok(vec![ck, csv])
}

fn selection_path(cfg: &RunConfig, target: &str) -> PathBuf {
    Command::Select.dir(cfg).join(format!("{target}.csv"))
}

fn select(cfg: &RunConfig, _dir: &Path) -> Result<Vec<PathBuf>> {
    let data = load(cfg)?;
    let bundle = source_checkpoint(cfg)?;
    let sources = data.sources.train_refs();
    let mut out = Vec::new();
    for t in &data.targets {
        let table = build_similarity_table(&bundle, &sources, &t.train)?;
        let selected = select_sources(&table, cfg.train.tau_ss)?;
        let path = selection_path(cfg, &t.id);
        write_selection_report(&table, &selected, &path)?;
        log::info!("{}: selected {} of {} sources", t.id, selected.len(), sources.len());
        out.push(path);
    }
    Ok(out)
}

fn adapt(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let data = load(cfg)?;
    let bundle = source_checkpoint(cfg)?;
    let mut out = Vec::new();
    for t in &data.targets {
        let report = selection_path(cfg, &t.id);
        let selected: Vec<String> = read_selection_report(&report)?
            .into_iter()
            .filter(|(_, _, keep)| *keep)
            .map(|(id, _, _)| id)
            .collect();
        let (adapted, metrics) = adapt_selected(&bundle, &data.sources, &selected, t, &cfg.train, cfg.seed, false)?;
        let tdir = dir.join(&t.id);
        mkdir(&tdir)?;
        let ck = tdir.join(CHECKPOINT_FILE);
        save_checkpoint(&adapted, &ck)?;
        let csv = tdir.join("metrics.csv");
        write_metrics_csv(&metrics, &csv)?;
        out.extend([ck, csv]);
    }
    Ok(out)
}

fn evaluate_cmd(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let data = load(cfg)?;
    let mut rows = Vec::new();
    for t in &data.targets {
        let bundle = adapted_checkpoint(cfg, &t.id)?;
        let accuracy = evaluate(&bundle, t.test())?;
        log::info!("{}: test accuracy {accuracy:.4}", t.id);
        rows.push(ResultRow {
            method: "full".into(),
            target: t.id.clone(),
            accuracy,
        });
    }
    let path = dir.join("results.csv");
    write_results_csv(&rows, &path)?;
    Ok(vec![path])
}

fn baseline(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let data = load(cfg)?;
    let bundle = source_checkpoint(cfg)?;
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for &kind in &cfg.baselines {
        for t in &data.targets {
            let metrics = run_baseline(kind, &bundle, &data.sources, t, &cfg.train, cfg.seed)?;
            if !metrics.epochs.is_empty() {
                let kdir = dir.join(kind.name());
                mkdir(&kdir)?;
                let csv = kdir.join(format!("{}.csv", t.id));
                write_metrics_csv(&metrics, &csv)?;
                out.push(csv);
            }
            rows.push(ResultRow {
                method: kind.name().into(),
                target: t.id.clone(),
                accuracy: metrics.test_acc.unwrap_or(f64::NAN),
            });
        }
    }
    let path = dir.join("results.csv");
    write_results_csv(&rows, &path)?;
    out.insert(0, path);
    Ok(out)
}

fn ablate_cmd(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let data = load(cfg)?;
    let bundle = source_checkpoint(cfg)?;
    let table = ablate(
        cfg.ablation,
        &cfg.ablation_grid(),
        &bundle,
        &data.sources,
        &data.targets,
        &cfg.train,
        cfg.seed,
    )?;
    let path = dir.join(format!("{}.csv", cfg.ablation.name()));
    write_ablation_csv(&table, &path)?;
    Ok(vec![path])
}

fn embeddings(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let data = load(cfg)?;
    mkdir(dir)?;
    let mut out = Vec::new();
    for t in &data.targets {
        let bundle = adapted_checkpoint(cfg, &t.id)?;
        let mut subjects = data.dataset.sources();
        subjects.push(&t.train);
        let path = dir.join(format!("{}.csv", t.id));
        export_embeddings(&bundle, &subjects, cfg.train.tau_pl, &path)?;
        out.push(path);
    }
    Ok(out)
}
