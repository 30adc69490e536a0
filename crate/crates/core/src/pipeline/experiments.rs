use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    adapt_stage, evaluate, evaluate_modality, AdaptInput, AdaptMode, LossWeights, RunMetrics,
    SourceData, SourceReport, TargetData, TrainConfig,
};
use crate::cotrain::{build_similarity_table, csv_err, generate_pseudo_labels, select_sources, SimilarityTable};
use crate::datagen::{Role, SubjectDataset};
use crate::error::{io_err, precondition, Error, Result};
use crate::model::ModelBundle;
use crate::nets::{embed, fuse, Modality};
use crate::tensor::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    LowerVisual,
    LowerPhysio,
    LowerFusion,
    BlendMmdUda,
    UpperFinetune,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        Self::LowerVisual,
        Self::LowerPhysio,
        Self::LowerFusion,
        Self::BlendMmdUda,
        Self::UpperFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LowerVisual => "lower_visual",
            Self::LowerPhysio => "lower_physio",
            Self::LowerFusion => "lower_fusion",
            Self::BlendMmdUda => "blend_mmd_uda",
            Self::UpperFinetune => "upper_finetune",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| precondition(format!("unknown baseline `{s}`")))
    }
}

/// Evaluates or trains one baseline for one target and reports its final
/// test accuracy in `RunMetrics::test_acc`.
pub fn run_baseline(
    kind: BaselineKind,
    source_bundle: &ModelBundle,
    sources: &SourceData,
    target: &TargetData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunMetrics> {
    let test = target.test();
    let lower = |acc: f64| RunMetrics {
        epochs: Vec::new(),
        test_acc: Some(acc),
    };
    match kind {
        BaselineKind::LowerVisual => Ok(lower(evaluate_modality(source_bundle, Modality::Visual, test)?)),
        BaselineKind::LowerPhysio => Ok(lower(evaluate_modality(source_bundle, Modality::Physio, test)?)),
        BaselineKind::LowerFusion => Ok(lower(evaluate(source_bundle, test)?)),
        BaselineKind::BlendMmdUda | BaselineKind::UpperFinetune => {
            let refs = sources.train_refs();
            let input = AdaptInput {
                sources: &refs,
                target,
                identity: None,
                track_test: false,
                observer: None,
            };
            let mode = if kind == BaselineKind::BlendMmdUda {
                AdaptMode::Blend
            } else {
                AdaptMode::Supervised
            };
            let (bundle, mut metrics) = adapt_stage(source_bundle, &input, mode, cfg, seed)?;
            metrics.test_acc = Some(evaluate(&bundle, test)?);
            Ok(metrics)
        }
    }
}

/// Selection, adaptation and evaluation of the full method on one target.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub target: String,
    pub table: SimilarityTable,
    pub selected: Vec<String>,
    pub bundle: ModelBundle,
    pub metrics: RunMetrics,
    pub test_acc: f64,
}

pub fn run_method(
    source_bundle: &ModelBundle,
    sources: &SourceData,
    target: &TargetData,
    cfg: &TrainConfig,
    seed: u64,
    track_test: bool,
) -> Result<MethodRun> {
    let table = build_similarity_table(source_bundle, &sources.train_refs(), &target.train)?;
    let selected = select_sources(&table, cfg.tau_ss)?;
    let (bundle, metrics) = adapt_selected(source_bundle, sources, &selected, target, cfg, seed, track_test)?;
    let test_acc = match metrics.test_acc {
        Some(a) => a,
        None => evaluate(&bundle, target.test())?,
    };
    Ok(MethodRun {
        target: target.id.clone(),
        table,
        selected,
        bundle,
        metrics,
        test_acc,
    })
}

/// Full-mode adaptation from an already chosen source list. Identity probes
/// use the held-out rows of every source.
pub fn adapt_selected(
    source_bundle: &ModelBundle,
    sources: &SourceData,
    selected: &[String],
    target: &TargetData,
    cfg: &TrainConfig,
    seed: u64,
    track_test: bool,
) -> Result<(ModelBundle, RunMetrics)> {
    let all = sources.train_refs();
    let refs = selected
        .iter()
        .map(|id| {
            all.iter()
                .find(|s| &s.subject_id == id)
                .copied()
                .ok_or_else(|| precondition(format!("selected source `{id}` is not a training source")))
        })
        .collect::<Result<Vec<&SubjectDataset>>>()?;
    let identity = sources.identity_set();
    let input = AdaptInput {
        sources: &refs,
        target,
        identity: Some(&identity),
        track_test,
        observer: None,
    };
    adapt_stage(source_bundle, &input, AdaptMode::Full, cfg, seed)
}

const METRIC_COLUMNS: [&str; 10] = [
    "epoch",
    "loss_s",
    "loss_unsup",
    "loss_agn",
    "loss_aw",
    "n_confident",
    "val_acc",
    "test_acc",
    "id_probe_v",
    "id_probe_p",
];

fn opt_str(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Columns: `epoch,loss_v,loss_p,loss_fusion,loss_d_v,loss_d_p,train_acc,heldout_acc,id_head_v,id_head_p`.
pub fn write_source_csv(report: &SourceReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "epoch",
        "loss_v",
        "loss_p",
        "loss_fusion",
        "loss_d_v",
        "loss_d_p",
        "train_acc",
        "heldout_acc",
        "id_head_v",
        "id_head_p",
    ])
    .map_err(|e| csv_err(path, e))?;
    for e in &report.epochs {
        let mut rec = vec![e.epoch.to_string()];
        rec.extend(
            [
                e.loss_v,
                e.loss_p,
                e.loss_fusion,
                e.loss_d_v,
                e.loss_d_p,
                e.train_acc,
                e.heldout_acc,
                e.id_head_v,
                e.id_head_p,
            ]
            .map(|v| v.to_string()),
        );
        w.write_record(rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_metrics_csv(metrics: &RunMetrics, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(METRIC_COLUMNS).map_err(|e| csv_err(path, e))?;
    for e in &metrics.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.loss_s.to_string(),
            e.loss_unsup.to_string(),
            e.loss_agn.to_string(),
            e.loss_aw.to_string(),
            e.n_confident.to_string(),
            e.val_acc.to_string(),
            opt_str(e.test_acc),
            opt_str(e.id_probe_v),
            opt_str(e.id_probe_p),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// One cell of the results summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub target: String,
    pub accuracy: f64,
}

/// Method × target table with a trailing `avg` column. Methods and targets
/// keep first-appearance order; a missing cell is left empty and excluded
/// from the average.
pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut methods: Vec<&str> = Vec::new();
    let mut targets: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !targets.contains(&r.target.as_str()) {
            targets.push(&r.target);
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["method".to_string()];
    header.extend(targets.iter().map(|t| t.to_string()));
    header.push("avg".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for m in methods {
        let mut rec = vec![m.to_string()];
        let mut acc = Vec::new();
        for t in &targets {
            let cell = rows.iter().find(|r| r.method == m && r.target == *t).map(|r| r.accuracy);
            acc.extend(cell);
            rec.push(opt_str(cell));
        }
        rec.push((acc.iter().sum::<f64>() / acc.len() as f64).to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    TauSsSweep,
    TauPlSweep,
    LossWeights,
    LossComponents,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        Self::TauSsSweep,
        Self::TauPlSweep,
        Self::LossWeights,
        Self::LossComponents,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TauSsSweep => "tau_ss_sweep",
            Self::TauPlSweep => "tau_pl_sweep",
            Self::LossWeights => "loss_weights",
            Self::LossComponents => "loss_components",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| precondition(format!("unknown ablation `{s}`")))
    }
}

/// Grid points of an ablation. Threshold sweeps take values; the weight
/// grid takes `(γ, α, β)` triples; the component suite is fixed.
#[derive(Debug, Clone, PartialEq)]
pub enum AblationGrid {
    Thresholds(Vec<f64>),
    Weights(Vec<[f64; 3]>),
    Components,
}

impl AblationGrid {
    /// Grid used when a run names only the ablation kind.
    pub fn default_for(kind: AblationKind) -> Self {
        match kind {
            AblationKind::TauSsSweep => Self::Thresholds(vec![0.0, 0.25, 0.5, 0.55, 0.75, 1.0]),
            AblationKind::TauPlSweep => Self::Thresholds(vec![0.8, 0.85, 0.9, 0.95, 0.99]),
            AblationKind::LossWeights => Self::Weights(vec![
                [1.0, 0.5, 0.1],
                [0.5, 0.5, 0.1],
                [2.0, 0.5, 0.1],
                [1.0, 0.1, 0.1],
                [1.0, 1.0, 0.1],
                [1.0, 0.5, 0.5],
                [1.0, 0.5, 1.0],
            ]),
            AblationKind::LossComponents => Self::Components,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    /// Selected source count per target, for the `τ_ss` sweep.
    pub selected: Option<Vec<usize>>,
    /// Test accuracy per target.
    pub accuracies: Vec<f64>,
}

impl AblationRow {
    pub fn avg_accuracy(&self) -> f64 {
        mean(&self.accuracies)
    }

    pub fn avg_selected(&self) -> Option<f64> {
        self.selected
            .as_ref()
            .map(|s| mean(&s.iter().map(|&c| c as f64).collect::<Vec<_>>()))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub targets: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// The incremental component suite: `L^s`, then adding `L^t`, `L_agn` and
/// `L_aw` with their configured weights.
fn component_settings(w: LossWeights) -> Vec<(String, LossWeights)> {
    let base = w.source_only();
    vec![
        ("ls".into(), base),
        ("ls+lt".into(), LossWeights { unsup: w.unsup, ..base }),
        (
            "ls+lt+lagn".into(),
            LossWeights {
                unsup: w.unsup,
                agn: w.agn,
                ..base
            },
        ),
        ("ls+lt+lagn+law".into(), w),
    ]
}

/// Runs the full method per grid point and target. Duplicate grid points
/// produce duplicate rows.
pub fn ablate(
    kind: AblationKind,
    grid: &AblationGrid,
    source_bundle: &ModelBundle,
    sources: &SourceData,
    targets: &[TargetData],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AblationTable> {
    if targets.is_empty() {
        return Err(precondition("ablation needs >= 1 target"));
    }
    let settings: Vec<(String, TrainConfig)> = match (kind, grid) {
        (AblationKind::TauSsSweep | AblationKind::TauPlSweep, AblationGrid::Thresholds(v)) => v
            .iter()
            .map(|&t| {
                let mut c = cfg.clone();
                if kind == AblationKind::TauSsSweep {
                    c.tau_ss = t;
                } else {
                    c.tau_pl = t;
                }
                (t.to_string(), c)
            })
            .collect(),
        (AblationKind::LossWeights, AblationGrid::Weights(v)) => v
            .iter()
            .map(|&[unsup, agn, aw]| {
                let mut c = cfg.clone();
                c.weights = LossWeights {
                    unsup,
                    agn,
                    aw,
                    ..cfg.weights
                };
                (format!("{unsup}/{agn}/{aw}"), c)
            })
            .collect(),
        (AblationKind::LossComponents, AblationGrid::Components) => component_settings(cfg.weights)
            .into_iter()
            .map(|(name, w)| {
                let mut c = cfg.clone();
                c.weights = w;
                (name, c)
            })
            .collect(),
        _ => return Err(precondition(format!("grid {grid:?} does not fit ablation {kind}"))),
    };
    if settings.is_empty() {
        return Err(precondition("ablation grid is empty"));
    }
    let mut rows = Vec::with_capacity(settings.len());
    for (setting, c) in settings {
        c.validate()?;
        let mut counts = Vec::with_capacity(targets.len());
        let mut accuracies = Vec::with_capacity(targets.len());
        for t in targets {
            let run = run_method(source_bundle, sources, t, &c, seed, false)?;
            counts.push(run.selected.len());
            accuracies.push(run.test_acc);
        }
        log::info!("ablation {kind} {setting}: mean accuracy {}", mean(&accuracies));
        rows.push(AblationRow {
            setting,
            selected: (kind == AblationKind::TauSsSweep).then_some(counts),
            accuracies,
        });
    }
    Ok(AblationTable {
        kind,
        targets: targets.iter().map(|t| t.id.clone()).collect(),
        rows,
    })
}

/// Columns: `setting`, for the `τ_ss` sweep `count_<target>…,avg_count`,
/// then `acc_<target>…,avg_acc`.
pub fn write_ablation_csv(table: &AblationTable, path: &Path) -> Result<()> {
    let with_counts = table.kind == AblationKind::TauSsSweep;
    let mut header = vec!["setting".to_string()];
    if with_counts {
        header.extend(table.targets.iter().map(|t| format!("count_{t}")));
        header.push("avg_count".into());
    }
    header.extend(table.targets.iter().map(|t| format!("acc_{t}")));
    header.push("avg_acc".into());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in &table.rows {
        let mut rec = vec![r.setting.clone()];
        if with_counts {
            let counts = r.selected.as_deref().unwrap_or(&[]);
            rec.extend(counts.iter().map(|c| c.to_string()));
            rec.push(r.avg_selected().unwrap_or(0.0).to_string());
        }
        rec.extend(r.accuracies.iter().map(|a| a.to_string()));
        rec.push(r.avg_accuracy().to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Leading columns of the embedding export; embedding coordinates follow as
/// `v_<i>`, `p_<i>` and `f_<i>` (fusion-head hidden layer).
pub const EMBEDDING_FIXED_COLUMNS: [&str; 4] = ["subject_id", "role", "label", "pseudo_label"];

pub fn embedding_header(bundle: &ModelBundle) -> Vec<String> {
    let mut h: Vec<String> = EMBEDDING_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for prefix in ["v", "p"] {
        h.extend((0..bundle.dims.embed).map(|i| format!("{prefix}_{i}")));
    }
    h.extend((0..bundle.dims.head_hidden).map(|i| format!("f_{i}")));
    h
}

/// Writes one row per sample of every subject. Target rows carry their
/// confident pseudo-label at `tau_pl`, other rows leave it empty.
pub fn export_embeddings(bundle: &ModelBundle, subjects: &[&SubjectDataset], tau_pl: f64, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(embedding_header(bundle)).map_err(|e| csv_err(path, e))?;
    for s in subjects {
        if s.is_empty() {
            continue;
        }
        let mut pseudo = vec![None; s.len()];
        if s.role == Role::Target {
            for c in generate_pseudo_labels(bundle, s, tau_pl)?.confident {
                pseudo[c.index] = Some(c.label);
            }
        }
        let mut g = Graph::new();
        let (xv, xp) = (g.constant(&s.visual), g.constant(&s.physio));
        let hv = embed(&bundle.visual.backbone, &mut g, xv)?;
        let hp = embed(&bundle.physio.backbone, &mut g, xp)?;
        let f = fuse(&mut g, hv, hp)?;
        let fh = bundle.fusion.net.hidden.forward(&mut g, f)?;
        let fh = g.relu(fh);
        let (hv, hp, fh) = (g.to_tensor(hv), g.to_tensor(hp), g.to_tensor(fh));
        let role = match s.role {
            Role::Source => "source",
            Role::Target => "target",
        };
        for i in 0..s.len() {
            let mut rec = vec![
                s.subject_id.clone(),
                role.to_string(),
                s.labels[i].to_string(),
                pseudo[i].map_or_else(String::new, |p: usize| p.to_string()),
            ];
            for t in [&hv, &hp, &fh] {
                rec.extend(t.row(i).iter().map(|v| v.to_string()));
            }
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// One parsed row of an embedding export.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub subject_id: String,
    pub role: String,
    pub label: usize,
    pub pseudo_label: Option<usize>,
    pub values: Vec<f64>,
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Vec<EmbeddingRow>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = k + 2;
        let bad = |field: &str| Error::Parse {
            path: path.to_path_buf(),
            line: Some(line),
            field: Some(field.to_string()),
            detail: "malformed embedding row".into(),
        };
        let get = |i: usize| rec.get(i).ok_or_else(|| bad(&header[i.min(header.len() - 1)]));
        let label = get(2)?.parse().map_err(|_| bad("label"))?;
        let pl = get(3)?;
        let pseudo_label = if pl.is_empty() {
            None
        } else {
            Some(pl.parse().map_err(|_| bad("pseudo_label"))?)
        };
        let values = (4..header.len())
            .map(|i| get(i)?.parse::<f64>().map_err(|_| bad(&header[i])))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow {
            subject_id: get(0)?.to_string(),
            role: get(1)?.to_string(),
            label,
            pseudo_label,
            values,
        });
    }
    Ok((header, rows))
}
