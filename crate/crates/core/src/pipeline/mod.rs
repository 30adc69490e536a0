//! Two-stage training orchestration: source stage, adaptation stage,
//! evaluation on a sealed test split, baselines and ablations.

mod adapt;
mod experiments;
mod source;

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::datagen::{split_indices, split_target, SubjectDataset, TARGET_FRACTIONS};
use crate::discrepancy::MmdConfig;
use crate::disentangle::EstimatorConfig;
use crate::error::{precondition, Error, Result};
use crate::model::{ModelBundle, ModelDims};
use crate::nets::{accuracy, probe_identity, ProbeConfig};
use crate::rng::stream;
use crate::tensor::{SgdConfig, Tensor};

pub use adapt::{adapt_stage, AdaptInput, AdaptMode, EpochMetrics, EpochObserver, RunMetrics};
pub use experiments::{
    ablate, adapt_selected, embedding_header, export_embeddings, read_embeddings, run_baseline, run_method, write_ablation_csv,
    write_metrics_csv, write_results_csv, write_source_csv, AblationGrid, AblationKind, AblationRow, AblationTable, BaselineKind,
    EmbeddingRow, MethodRun, ResultRow, EMBEDDING_FIXED_COLUMNS,
};
pub use source::{train_source_stage, SourceEpoch, SourceReport};

/// Weights of the adaptation objective `L^s + γ·L^t + α·L_agn + β·L_aw`,
/// plus `λ_d` for the disentanglement term of the source stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// γ
    pub unsup: f64,
    /// α
    pub agn: f64,
    /// β
    pub aw: f64,
    /// λ_d
    pub disentangle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            unsup: 1.0,
            agn: 0.5,
            aw: 0.1,
            disentangle: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("weights.unsup", self.unsup),
            ("weights.agn", self.agn),
            ("weights.aw", self.aw),
            ("weights.disentangle", self.disentangle),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Adaptation weights set to zero; `λ_d` kept.
    pub fn source_only(self) -> Self {
        Self {
            unsup: 0.0,
            agn: 0.0,
            aw: 0.0,
            ..self
        }
    }
}

/// Optimizer settings. The effective learning rate is `base_lr · lr_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub lr_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eta_min: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            lr_scale: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            eta_min: 2e-5,
        }
    }
}

impl OptimConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.base_lr * self.lr_scale,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            eta_min: self.eta_min,
        }
    }
}

/// Everything that shapes training, shared by the source and adaptation
/// stages and by the baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub embed: usize,
    pub head_hidden: usize,
    pub optim: OptimConfig,
    pub source_epochs: usize,
    /// Adaptation epochs.
    pub epochs: usize,
    pub source_batch: usize,
    pub target_batch: usize,
    /// Rows drawn from each selected source per adaptation step for `L^s`.
    pub per_source_batch: usize,
    /// Rows per (domain, class) for the class-aware term.
    pub k_per_class: usize,
    /// Rows per source for the class-agnostic term.
    pub agn_per_source: usize,
    pub tau_ss: f64,
    pub tau_pl: f64,
    pub weights: LossWeights,
    pub mmd: MmdConfig,
    pub estimator: EstimatorConfig,
    /// Pseudo-labels are regenerated every `pl_refresh_n` adaptation epochs.
    pub pl_refresh_n: usize,
    /// Adds a uniform-target cross-entropy through the frozen identity heads
    /// to the source stage, weighted by `λ_d`.
    pub identity_aux_loss: bool,
    /// Weight of the global alignment term of the blended baseline.
    pub blend_weight: f64,
    /// Fraction of every source subject held out for identity probing.
    pub source_holdout: f64,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 16,
            head_hidden: 32,
            optim: OptimConfig::default(),
            source_epochs: 40,
            epochs: 20,
            source_batch: 64,
            target_batch: 32,
            per_source_batch: 8,
            k_per_class: 8,
            agn_per_source: 8,
            tau_ss: 0.55,
            tau_pl: 0.95,
            weights: LossWeights::default(),
            mmd: MmdConfig::default(),
            // The entropy-sum objective collapses the embedding at any weight
            // that moves the identity probe; the mutual-information form does not.
            estimator: EstimatorConfig {
                mi_variant: true,
                ..EstimatorConfig::default()
            },
            pl_refresh_n: 1,
            identity_aux_loss: false,
            blend_weight: 1.0,
            source_holdout: 0.2,
            probe: ProbeConfig::default(),
        }
    }
}

pub(crate) fn config_err(key: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        detail: detail.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("head_hidden", self.head_hidden),
            ("source_batch", self.source_batch),
            ("target_batch", self.target_batch),
            ("per_source_batch", self.per_source_batch),
            ("k_per_class", self.k_per_class),
            ("agn_per_source", self.agn_per_source),
            ("pl_refresh_n", self.pl_refresh_n),
        ] {
            if v == 0 {
                return Err(config_err(key, "must be >= 1"));
            }
        }
        if self.source_batch < 2 {
            return Err(config_err("source_batch", "must be >= 2"));
        }
        for (key, v) in [("tau_ss", self.tau_ss), ("tau_pl", self.tau_pl)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.source_holdout > 0.0 && self.source_holdout < 1.0) {
            return Err(config_err(
                "source_holdout",
                format!("must lie in (0, 1), got {}", self.source_holdout),
            ));
        }
        if !(self.blend_weight.is_finite() && self.blend_weight >= 0.0) {
            return Err(config_err("blend_weight", "must be finite and >= 0"));
        }
        let o = &self.optim;
        if !(o.base_lr > 0.0 && o.lr_scale > 0.0) {
            return Err(config_err("optim.base_lr", "base_lr and lr_scale must be > 0"));
        }
        self.optim
            .sgd()
            .validate()
            .map_err(|e| config_err("optim", e.to_string()))?;
        self.weights.validate()?;
        self.estimator
            .validate()
            .map_err(|e| config_err("estimator", e.to_string()))?;
        if self.mmd.scales.is_empty() || self.mmd.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(config_err("mmd.scales", "must be non-empty and positive"));
        }
        Ok(())
    }

    pub fn dims(&self, dim_visual: usize, dim_physio: usize, n_classes: usize, n_ids: usize) -> ModelDims {
        ModelDims {
            dim_visual,
            dim_physio,
            hidden: self.hidden,
            embed: self.embed,
            head_hidden: self.head_hidden,
            n_classes,
            n_ids,
        }
    }
}

/// Source subjects split per subject into a training part and a held-out
/// part. The held-out part is only used for identity probing and source
/// expression accuracy.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub train: Vec<SubjectDataset>,
    pub heldout: Vec<SubjectDataset>,
}

impl SourceData {
    pub fn split(sources: &[&SubjectDataset], holdout: f64, seed: u64) -> Result<Self> {
        if sources.is_empty() {
            return Err(precondition("no source subjects"));
        }
        let mut train = Vec::with_capacity(sources.len());
        let mut heldout = Vec::with_capacity(sources.len());
        for s in sources {
            let mut rng = stream(seed, &format!("holdout/{}", s.subject_id));
            let parts = split_indices(&s.labels, &[1.0 - holdout, holdout], &mut rng)?;
            train.push(s.subset(&parts[0]));
            heldout.push(s.subset(&parts[1]));
        }
        Ok(Self { train, heldout })
    }

    pub fn train_refs(&self) -> Vec<&SubjectDataset> {
        self.train.iter().collect()
    }

    pub fn n_ids(&self) -> usize {
        self.train.len()
    }

    /// Held-out rows stacked, with the source position as identity.
    pub fn identity_set(&self) -> IdentitySet {
        IdentitySet::stack(&self.heldout.iter().collect::<Vec<_>>())
    }

    /// Training rows stacked, with the source position as identity.
    pub fn train_identity_set(&self) -> IdentitySet {
        IdentitySet::stack(&self.train.iter().collect::<Vec<_>>())
    }
}

/// Stacked features with expression labels and identities.
#[derive(Debug, Clone)]
pub struct IdentitySet {
    pub visual: Tensor,
    pub physio: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl IdentitySet {
    pub fn stack(subjects: &[&SubjectDataset]) -> Self {
        let rows: Vec<(usize, usize)> = subjects
            .iter()
            .enumerate()
            .flat_map(|(k, s)| (0..s.len()).map(move |i| (k, i)))
            .collect();
        let b = Batch::gather(subjects, &rows);
        Self {
            visual: b.visual,
            physio: b.physio,
            labels: b.labels,
            ids: b.ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Rows gathered from several subjects; `ids` is the subject position.
#[derive(Debug, Clone)]
pub(crate) struct Batch {
    pub visual: Tensor,
    pub physio: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn gather(subjects: &[&SubjectDataset], rows: &[(usize, usize)]) -> Self {
        let (dv, dp) = subjects
            .first()
            .map_or((0, 0), |s| (s.visual.cols(), s.physio.cols()));
        let mut v = Vec::with_capacity(rows.len() * dv);
        let mut p = Vec::with_capacity(rows.len() * dp);
        let mut labels = Vec::with_capacity(rows.len());
        let mut ids = Vec::with_capacity(rows.len());
        for &(k, i) in rows {
            let s = subjects[k];
            v.extend_from_slice(s.visual.row(i));
            p.extend_from_slice(s.physio.row(i));
            labels.push(s.labels[i]);
            ids.push(k);
        }
        Self {
            visual: Tensor::new(vec![rows.len(), dv], v).expect("row widths agree"),
            physio: Tensor::new(vec![rows.len(), dp], p).expect("row widths agree"),
            labels,
            ids,
        }
    }
}

/// Target test split behind a capability: the rows are only reachable
/// through [`evaluate`], and every opening is logged.
#[derive(Debug)]
pub struct SealedTest {
    data: SubjectDataset,
    log: RefCell<Vec<String>>,
}

impl SealedTest {
    pub fn new(data: SubjectDataset) -> Self {
        Self {
            data,
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn subject_id(&self) -> &str {
        &self.data.subject_id
    }

    /// Who opened the split, in order.
    pub fn access_log(&self) -> Vec<String> {
        self.log.borrow().clone()
    }

    pub(crate) fn open(&self, who: &str) -> &SubjectDataset {
        self.log.borrow_mut().push(who.to_string());
        &self.data
    }
}

/// One target subject split into train (unlabelled during adaptation),
/// validation and a sealed test part.
#[derive(Debug)]
pub struct TargetData {
    pub id: String,
    pub train: SubjectDataset,
    pub val: SubjectDataset,
    test: SealedTest,
}

impl TargetData {
    pub fn split(subject: &SubjectDataset, seed: u64) -> Result<Self> {
        let s = split_target(subject, TARGET_FRACTIONS, seed)?;
        Ok(Self {
            id: subject.subject_id.clone(),
            train: s.train,
            val: s.val,
            test: SealedTest::new(s.test),
        })
    }

    pub fn test(&self) -> &SealedTest {
        &self.test
    }
}

/// Fusion-head top-1 accuracy on a labelled set.
pub fn fused_accuracy(bundle: &ModelBundle, data: &SubjectDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(precondition(format!("accuracy on empty set {}", data.subject_id)));
    }
    let pred = bundle.predict_fused(&data.visual, &data.physio)?;
    Ok(accuracy(&pred, &data.labels))
}

/// Fusion-head top-1 accuracy on the sealed test split.
pub fn evaluate(bundle: &ModelBundle, test: &SealedTest) -> Result<f64> {
    if test.is_empty() {
        return Err(precondition(format!("empty test split for {}", test.subject_id())));
    }
    fused_accuracy(bundle, test.open("evaluate"))
}

/// Identity accuracy `(visual, physio)` of fresh probes fitted on the
/// training-part embeddings of every source and scored on the held-out part.
pub fn fresh_identity_probe(bundle: &ModelBundle, sources: &SourceData, cfg: &ProbeConfig, seed: u64) -> Result<(f64, f64)> {
    let (train, held) = (sources.train_identity_set(), sources.identity_set());
    if train.is_empty() || held.is_empty() {
        return Err(precondition("identity probe needs training and held-out source rows"));
    }
    let mut acc = [0.0; 2];
    for (k, m) in crate::nets::Modality::ALL.into_iter().enumerate() {
        let htr = bundle.embed_values(m, source::features(&train, m))?;
        let hho = bundle.embed_values(m, source::features(&held, m))?;
        let mut rng = stream(seed, &format!("probe/{m:?}"));
        acc[k] = probe_identity(&htr, &train.ids, &hho, &held.ids, sources.n_ids(), cfg, &mut rng)?;
    }
    Ok((acc[0], acc[1]))
}

/// Single-modality top-1 accuracy on the sealed test split.
pub fn evaluate_modality(bundle: &ModelBundle, m: crate::nets::Modality, test: &SealedTest) -> Result<f64> {
    if test.is_empty() {
        return Err(precondition(format!("empty test split for {}", test.subject_id())));
    }
    let data = test.open("evaluate");
    let pred = bundle.predict_modality(m, data.features(m))?;
    Ok(accuracy(&pred, &data.labels))
}

