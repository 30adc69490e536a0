use std::fmt;

use serde::{Deserialize, Serialize};

use super::source::{batch_features, heldout_scores, sum_vars, trunk_params};
use super::{evaluate, fused_accuracy, Batch, IdentitySet, TargetData, TrainConfig};
use crate::cotrain::{generate_pseudo_labels, BatchPlan, ClassAwareSampler, Pool, PseudoLabelPartition};
use crate::datagen::SubjectDataset;
use crate::discrepancy::{agnostic_disc, class_agnostic_loss, class_aware_loss, inter_class_disc, intra_class_disc, ClassBlocks};
use crate::error::{precondition, Result};
use crate::model::ModelBundle;
use crate::nets::{cross_entropy, embed, fuse, Classifier, Modality};
use crate::rng::{stream, Rng};
use crate::tensor::{Graph, Sgd, Var};

/// Which objective the adaptation loop optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    /// `L^s + γ·L^t + α·L_agn + β·L_aw` over the given sources.
    Full,
    /// Sources pooled into one domain, source cross-entropy plus one global
    /// discrepancy per modality against random target rows.
    Blend,
    /// Supervised fine-tuning on the labelled target training rows.
    Supervised,
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Blend => "blend",
            Self::Supervised => "supervised",
        })
    }
}

/// One adaptation epoch. Losses are step means of the unweighted terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_s: f64,
    pub loss_unsup: f64,
    pub loss_agn: f64,
    pub loss_aw: f64,
    /// `|T^l|`
    pub n_confident: usize,
    /// `|C̃|`
    pub n_confident_classes: usize,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
    pub id_probe_v: Option<f64>,
    pub id_probe_p: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// Final test accuracy, when the test split was evaluated.
    pub test_acc: Option<f64>,
}

/// Called in full mode once per epoch with the bundle that produced the
/// epoch's pseudo-labels and the partition itself.
pub type EpochObserver<'a> = &'a dyn Fn(usize, &ModelBundle, &PseudoLabelPartition);

/// Data an adaptation run sees.
#[derive(Clone, Copy)]
pub struct AdaptInput<'a> {
    /// Selected sources; ignored by supervised fine-tuning.
    pub sources: &'a [&'a SubjectDataset],
    pub target: &'a TargetData,
    /// Held-out source rows for per-epoch identity-head accuracy.
    pub identity: Option<&'a IdentitySet>,
    /// Evaluate the sealed test split after every epoch. This only reports
    /// and never steers training.
    pub track_test: bool,
    pub observer: Option<EpochObserver<'a>>,
}

impl fmt::Debug for AdaptInput<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdaptInput")
            .field("sources", &self.sources.iter().map(|s| &s.subject_id).collect::<Vec<_>>())
            .field("target", &self.target.id)
            .field("identity", &self.identity.map(|s| s.len()))
            .field("track_test", &self.track_test)
            .field("observer", &self.observer.is_some())
            .finish()
    }
}

/// Adapts a copy of `bundle`. Identity heads and estimators are left
/// untouched.
pub fn adapt_stage(
    bundle: &ModelBundle,
    input: &AdaptInput<'_>,
    mode: AdaptMode,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelBundle, RunMetrics)> {
    let AdaptInput {
        sources,
        target,
        identity,
        track_test,
        observer,
    } = *input;
    cfg.validate()?;
    if mode != AdaptMode::Supervised && sources.is_empty() {
        return Err(precondition("adaptation needs >= 1 selected source"));
    }
    if target.train.is_empty() {
        return Err(precondition(format!("target {} has no training rows", target.id)));
    }
    let mut bundle = bundle.clone();
    let mut opt = Sgd::new(cfg.optim.sgd())?;
    let mut rng = stream(seed, &format!("adapt/{mode}"));
    // Draws that depend on the pseudo-labels use their own stream, so the
    // source draws stay fixed when only the target's content changes.
    let mut pl_rng = stream(seed, &format!("adapt/{mode}/pseudo"));
    let n_iter = target.train.len().div_ceil(cfg.target_batch);
    let mut state = LoopState::new(sources, &target.train, mode, &mut rng);
    let mut metrics = RunMetrics::default();
    for epoch in 0..cfg.epochs {
        opt.set_epoch(epoch, cfg.epochs);
        if mode == AdaptMode::Full {
            if epoch % cfg.pl_refresh_n == 0 {
                let part = generate_pseudo_labels(&bundle, &target.train, cfg.tau_pl)?;
                state.refresh(sources, &target.train, part, cfg, &mut pl_rng);
            } else {
                state.new_epoch(&mut pl_rng);
            }
            if let Some(obs) = observer {
                obs(epoch, &bundle, &state.partition);
            }
            if state.partition.confident.is_empty() {
                log::warn!("epoch {epoch}: no confident pseudo-labels; agnostic alignment only");
            }
        }
        let mut sums = [0.0; 4];
        for _ in 0..n_iter {
            let l = match mode {
                AdaptMode::Full => {
                    let rngs = (&mut rng, &mut pl_rng);
                    full_step(&mut bundle, sources, &target.train, &mut state, cfg, rngs, &mut opt)?
                }
                AdaptMode::Blend => blend_step(&mut bundle, sources, &target.train, &mut state, cfg, &mut rng, &mut opt)?,
                AdaptMode::Supervised => supervised_step(&mut bundle, &target.train, &mut state, cfg, &mut rng, &mut opt)?,
            };
            for (s, v) in sums.iter_mut().zip(l) {
                *s += v;
            }
        }
        let (id_v, id_p) = match identity {
            Some(set) => {
                let (_, v, p) = heldout_scores(&bundle, set)?;
                (Some(v), Some(p))
            }
            None => (None, None),
        };
        let rec = EpochMetrics {
            epoch,
            loss_s: sums[0] / n_iter as f64,
            loss_unsup: sums[1] / n_iter as f64,
            loss_agn: sums[2] / n_iter as f64,
            loss_aw: sums[3] / n_iter as f64,
            n_confident: state.partition.confident.len(),
            n_confident_classes: state.partition.classes.len(),
            val_acc: if target.val.is_empty() { 0.0 } else { fused_accuracy(&bundle, &target.val)? },
            test_acc: if track_test { Some(evaluate(&bundle, target.test())?) } else { None },
            id_probe_v: id_v,
            id_probe_p: id_p,
        };
        log::debug!("adapt {mode} epoch {epoch}: {rec:?}");
        metrics.epochs.push(rec);
    }
    metrics.test_acc = metrics.epochs.last().and_then(|e| e.test_acc);
    Ok((bundle, metrics))
}

/// Pools and the current pseudo-label partition.
struct LoopState {
    /// One pool per source over all its rows.
    sources: Vec<Pool>,
    /// Pooled `(source, row)` positions for the blended baseline.
    pooled: Pool,
    pooled_rows: Vec<(usize, usize)>,
    /// All target training rows.
    target_all: Pool,
    partition: PseudoLabelPartition,
    confident: Pool,
    sampler: Option<ClassAwareSampler>,
    /// Per source, rows whose class is not confident.
    agn_sources: Vec<Pool>,
    /// Non-confident target rows.
    agn_target: Pool,
}

impl LoopState {
    fn new(sources: &[&SubjectDataset], target: &SubjectDataset, mode: AdaptMode, rng: &mut Rng) -> Self {
        let pooled_rows: Vec<(usize, usize)> = if mode == AdaptMode::Blend {
            sources
                .iter()
                .enumerate()
                .flat_map(|(k, s)| (0..s.len()).map(move |i| (k, i)))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            sources: sources.iter().map(|s| Pool::new((0..s.len()).collect(), rng)).collect(),
            pooled: Pool::new((0..pooled_rows.len()).collect(), rng),
            pooled_rows,
            target_all: Pool::new((0..target.len()).collect(), rng),
            partition: PseudoLabelPartition::default(),
            confident: Pool::new(Vec::new(), rng),
            sampler: None,
            agn_sources: Vec::new(),
            agn_target: Pool::new(Vec::new(), rng),
        }
    }

    fn refresh(
        &mut self,
        sources: &[&SubjectDataset],
        target: &SubjectDataset,
        partition: PseudoLabelPartition,
        cfg: &TrainConfig,
        rng: &mut Rng,
    ) {
        debug_assert_eq!(partition.len(), target.len());
        self.confident = Pool::new(partition.confident.iter().map(|c| c.index).collect(), rng);
        self.sampler = Some(ClassAwareSampler::new(sources, &partition, cfg.k_per_class, rng));
        self.agn_sources = sources
            .iter()
            .map(|s| {
                let rows = (0..s.len()).filter(|&i| !partition.classes.contains(&s.labels[i])).collect();
                Pool::new(rows, rng)
            })
            .collect();
        self.agn_target = Pool::new(partition.non_confident.clone(), rng);
        self.partition = partition;
    }

    fn new_epoch(&mut self, rng: &mut Rng) {
        if let Some(s) = self.sampler.as_mut() {
            s.new_epoch(rng);
        }
    }
}

/// Source rows of one step, tagged by the term that uses them.
#[derive(Default)]
struct Rows {
    src: Vec<(usize, usize)>,
    tgt: Vec<usize>,
}

impl Rows {
    fn push_src(&mut self, k: usize, idx: &[usize]) -> Vec<usize> {
        let start = self.src.len();
        self.src.extend(idx.iter().map(|&i| (k, i)));
        (start..self.src.len()).collect()
    }

    fn push_tgt(&mut self, idx: &[usize]) -> Vec<usize> {
        let start = self.tgt.len();
        self.tgt.extend_from_slice(idx);
        (start..self.tgt.len()).collect()
    }
}

/// Embeddings of a gathered batch, both modalities.
struct Embedded {
    h: [Var; 2],
}

fn embed_batch(bundle: &ModelBundle, g: &mut Graph, b: &Batch) -> Result<Embedded> {
    let mut h = Vec::with_capacity(2);
    for m in Modality::ALL {
        let x = g.constant(batch_features(b, m));
        h.push(embed(&bundle.branch(m).backbone, g, x)?);
    }
    Ok(Embedded { h: [h[0], h[1]] })
}

/// Fusion cross-entropy plus both per-modality cross-entropies on `idx`.
fn labelled_loss(bundle: &ModelBundle, g: &mut Graph, e: &Embedded, idx: &[usize], labels: &[usize]) -> Result<Var> {
    let hv = g.select_rows(e.h[0], idx)?;
    let hp = g.select_rows(e.h[1], idx)?;
    let f = fuse(g, hv, hp)?;
    let fl = bundle.fusion.classify(g, f)?;
    let mut terms = vec![cross_entropy(g, fl, labels)?];
    for (m, h) in Modality::ALL.into_iter().zip([hv, hp]) {
        let l = bundle.branch(m).expr.classify(g, h)?;
        terms.push(cross_entropy(g, l, labels)?);
    }
    sum_vars(g, &terms)
}

fn fusion_loss(bundle: &ModelBundle, g: &mut Graph, e: &Embedded, idx: &[usize], labels: &[usize]) -> Result<Var> {
    let hv = g.select_rows(e.h[0], idx)?;
    let hp = g.select_rows(e.h[1], idx)?;
    let f = fuse(g, hv, hp)?;
    let fl = bundle.fusion.classify(g, f)?;
    cross_entropy(g, fl, labels)
}

fn apply_step(bundle: &mut ModelBundle, g: &mut Graph, total: Var, opt: &mut Sgd) -> Result<()> {
    g.backward(total)?;
    let mut trunk = trunk_params(bundle);
    g.write_grads(trunk.iter_mut().map(|t| &mut **t))?;
    opt.step(&mut trunk)
}

/// Returns the unweighted `[L^s, L^t, L_agn, L_aw]`.
fn full_step(
    bundle: &mut ModelBundle,
    sources: &[&SubjectDataset],
    target: &SubjectDataset,
    st: &mut LoopState,
    cfg: &TrainConfig,
    (rng, pl_rng): (&mut Rng, &mut Rng),
    opt: &mut Sgd,
) -> Result<[f64; 4]> {
    let w = cfg.weights;
    let mut rows = Rows::default();
    let mut seg_s = Vec::new();
    for (k, pool) in st.sources.iter_mut().enumerate() {
        seg_s.extend(rows.push_src(k, &pool.draw(cfg.per_source_batch, rng)));
    }

    let mut seg_t = Vec::new();
    let mut pseudo = Vec::new();
    if w.unsup > 0.0 && !st.confident.is_empty() {
        let idx = st.confident.draw(cfg.target_batch, pl_rng);
        pseudo = st.partition.labels_of(&idx);
        seg_t = rows.push_tgt(&idx);
    }

    // Per class: per-source segments and the target segment.
    let mut aw: Vec<(usize, Vec<Vec<usize>>, Vec<usize>)> = Vec::new();
    if w.aw > 0.0 {
        let plan: Option<BatchPlan> = st.sampler.as_mut().and_then(|s| s.sample(pl_rng));
        for (c, draw) in plan.into_iter().flatten() {
            let src = draw.sources.iter().enumerate().map(|(k, idx)| rows.push_src(k, idx)).collect();
            aw.push((c, src, rows.push_tgt(&draw.target)));
        }
    }

    let mut agn_src: Vec<Vec<usize>> = Vec::new();
    let mut agn_tgt = Vec::new();
    if w.agn > 0.0 && !st.agn_target.is_empty() && st.agn_sources.iter().any(|p| !p.is_empty()) {
        for (k, pool) in st.agn_sources.iter_mut().enumerate() {
            agn_src.push(rows.push_src(k, &pool.draw(cfg.agn_per_source, pl_rng)));
        }
        agn_tgt = rows.push_tgt(&st.agn_target.draw(cfg.target_batch, pl_rng));
    }

    let mut g = Graph::new();
    let sb = Batch::gather(sources, &rows.src);
    let es = embed_batch(bundle, &mut g, &sb)?;
    let et = if rows.tgt.is_empty() {
        None
    } else {
        let tb = Batch::gather(&[target], &rows.tgt.iter().map(|&i| (0, i)).collect::<Vec<_>>());
        Some(embed_batch(bundle, &mut g, &tb)?)
    };

    let labels_s: Vec<usize> = seg_s.iter().map(|&i| sb.labels[i]).collect();
    let ls = labelled_loss(bundle, &mut g, &es, &seg_s, &labels_s)?;
    let mut out = [g.item(ls), 0.0, 0.0, 0.0];
    let mut terms = vec![ls];

    if let (false, Some(et)) = (seg_t.is_empty(), et.as_ref()) {
        let lt = fusion_loss(bundle, &mut g, et, &seg_t, &pseudo)?;
        out[1] = g.item(lt);
        terms.push(g.scale(lt, w.unsup));
    }

    if let (false, Some(et)) = (agn_tgt.is_empty(), et.as_ref()) {
        let mut per_m = Vec::with_capacity(2);
        for k in 0..2 {
            let srcs = agn_src
                .iter()
                .map(|idx| {
                    if idx.is_empty() {
                        Ok(None)
                    } else {
                        g.select_rows(es.h[k], idx).map(Some)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let t = g.select_rows(et.h[k], &agn_tgt)?;
            per_m.push(agnostic_disc(&mut g, &srcs, Some(t), &cfg.mmd)?);
        }
        let la = class_agnostic_loss(&mut g, &per_m)?;
        out[2] = g.item(la);
        terms.push(g.scale(la, w.agn));
    }

    if let (false, Some(et)) = (aw.is_empty(), et.as_ref()) {
        let mut per_m = Vec::with_capacity(2);
        for k in 0..2 {
            let mut src_blocks = vec![ClassBlocks::new(); sources.len()];
            let mut tgt_blocks = ClassBlocks::new();
            for (c, src, tgt) in &aw {
                for (blocks, idx) in src_blocks.iter_mut().zip(src) {
                    if !idx.is_empty() {
                        blocks.insert(*c, g.select_rows(es.h[k], idx)?);
                    }
                }
                tgt_blocks.insert(*c, g.select_rows(et.h[k], tgt)?);
            }
            let intra = intra_class_disc(&mut g, &src_blocks, &tgt_blocks, &cfg.mmd)?;
            let inter = inter_class_disc(&mut g, &src_blocks, &tgt_blocks, &cfg.mmd)?;
            per_m.push((intra, inter));
        }
        let lw = class_aware_loss(&mut g, &per_m)?;
        out[3] = g.item(lw);
        terms.push(g.scale(lw, w.aw));
    }

    let total = sum_vars(&mut g, &terms)?;
    apply_step(bundle, &mut g, total, opt)?;
    Ok(out)
}

/// Returns `[L^s, 0, L_global, 0]`.
fn blend_step(
    bundle: &mut ModelBundle,
    sources: &[&SubjectDataset],
    target: &SubjectDataset,
    st: &mut LoopState,
    cfg: &TrainConfig,
    rng: &mut Rng,
    opt: &mut Sgd,
) -> Result<[f64; 4]> {
    let n = cfg.per_source_batch * sources.len();
    let picked: Vec<(usize, usize)> = st.pooled.draw(n, rng).into_iter().map(|i| st.pooled_rows[i]).collect();
    let tgt = st.target_all.draw(cfg.target_batch, rng);
    let mut g = Graph::new();
    let sb = Batch::gather(sources, &picked);
    let es = embed_batch(bundle, &mut g, &sb)?;
    let all: Vec<usize> = (0..picked.len()).collect();
    let ls = labelled_loss(bundle, &mut g, &es, &all, &sb.labels)?;
    let mut out = [g.item(ls), 0.0, 0.0, 0.0];
    let mut terms = vec![ls];
    if cfg.blend_weight > 0.0 {
        let tb = Batch::gather(&[target], &tgt.iter().map(|&i| (0, i)).collect::<Vec<_>>());
        let et = embed_batch(bundle, &mut g, &tb)?;
        let mut per_m = Vec::with_capacity(2);
        for k in 0..2 {
            per_m.push(cfg.mmd.discrepancy(&mut g, es.h[k], et.h[k])?);
        }
        let la = class_agnostic_loss(&mut g, &per_m)?;
        out[2] = g.item(la);
        terms.push(g.scale(la, cfg.blend_weight));
    }
    let total = sum_vars(&mut g, &terms)?;
    apply_step(bundle, &mut g, total, opt)?;
    Ok(out)
}

/// Returns `[L_target, 0, 0, 0]`.
fn supervised_step(
    bundle: &mut ModelBundle,
    target: &SubjectDataset,
    st: &mut LoopState,
    cfg: &TrainConfig,
    rng: &mut Rng,
    opt: &mut Sgd,
) -> Result<[f64; 4]> {
    let idx = st.target_all.draw(cfg.target_batch, rng);
    let mut g = Graph::new();
    let tb = Batch::gather(&[target], &idx.iter().map(|&i| (0, i)).collect::<Vec<_>>());
    let et = embed_batch(bundle, &mut g, &tb)?;
    let all: Vec<usize> = (0..idx.len()).collect();
    let l = labelled_loss(bundle, &mut g, &et, &all, &tb.labels)?;
    let out = [g.item(l), 0.0, 0.0, 0.0];
    apply_step(bundle, &mut g, l, opt)?;
    Ok(out)
}
