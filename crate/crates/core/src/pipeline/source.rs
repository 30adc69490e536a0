use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Batch, IdentitySet, SourceData, TrainConfig};
use crate::datagen::SubjectDataset;
use crate::disentangle::{disentangle_loss, estimator_fit_step, one_hot};
use crate::error::{precondition, Result};
use crate::model::ModelBundle;
use crate::nets::{accuracy, argmax_rows, cross_entropy, embed, fuse, identity_probe_accuracy, Classifier, Modality, Module};
use crate::rng::stream;
use crate::tensor::{Graph, Sgd, Tensor, Var};

/// Per-epoch record of the source stage. Losses are batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEpoch {
    pub epoch: usize,
    pub loss_v: f64,
    pub loss_p: f64,
    pub loss_fusion: f64,
    pub loss_d_v: f64,
    pub loss_d_p: f64,
    /// Fusion accuracy on the training batches as they were seen.
    pub train_acc: f64,
    /// Fusion accuracy on the held-out source rows.
    pub heldout_acc: f64,
    /// Identity-head accuracy on the held-out source rows.
    pub id_head_v: f64,
    pub id_head_p: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub epochs: Vec<SourceEpoch>,
}

/// Identity heads and estimators see one identity per training source.
/// Each modality minimises `L^s_m + λ_d·L^d_m`; the fusion head learns on the
/// concatenated embeddings; identity heads learn on detached embeddings with
/// their own optimizer; each estimator takes one fit step per batch on the
/// pre-step embeddings.
pub fn train_source_stage(
    sources: &SourceData,
    n_classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelBundle, SourceReport)> {
    cfg.validate()?;
    let train = sources.train_refs();
    let n_ids = train.len();
    let first = *train.first().ok_or_else(|| precondition("source stage needs >= 1 source"))?;
    let dims = cfg.dims(first.visual.cols(), first.physio.cols(), n_classes, n_ids);
    let mut bundle = ModelBundle::new(dims, cfg.estimator, &mut stream(seed, "init"))?;
    let lambda_d = cfg.weights.disentangle;

    let rows: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(k, s)| (0..s.len()).map(move |i| (k, i)))
        .collect();
    if rows.len() < 2 {
        return Err(precondition("source stage needs >= 2 training rows"));
    }
    if lambda_d > 0.0 {
        warm_start_estimators(&mut bundle, &train, &rows, seed)?;
    }

    let heldout = sources.identity_set();
    let mut opt = Sgd::new(cfg.optim.sgd())?;
    let mut id_opt = Sgd::new(cfg.optim.sgd())?;
    let mut rng = stream(seed, "source/batches");
    let mut order = rows;
    let mut report = SourceReport::default();
    for epoch in 0..cfg.source_epochs {
        opt.set_epoch(epoch, cfg.source_epochs);
        id_opt.set_epoch(epoch, cfg.source_epochs);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let (mut hits, mut seen, mut steps) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.source_batch) {
            if chunk.len() < 2 {
                continue;
            }
            let b = Batch::gather(&train, chunk);
            let out = source_step(&mut bundle, &b, n_ids, cfg, &mut opt, &mut id_opt)?;
            for (s, v) in sums.iter_mut().zip(out.losses) {
                *s += v;
            }
            hits += out.train_acc * chunk.len() as f64;
            seen += chunk.len();
            steps += 1;
        }
        let mean = |v: f64| if steps == 0 { 0.0 } else { v / steps as f64 };
        let (heldout_acc, id_head_v, id_head_p) = heldout_scores(&bundle, &heldout)?;
        let rec = SourceEpoch {
            epoch,
            loss_v: mean(sums[0]),
            loss_p: mean(sums[1]),
            loss_fusion: mean(sums[2]),
            loss_d_v: mean(sums[3]),
            loss_d_p: mean(sums[4]),
            train_acc: if seen == 0 { 0.0 } else { hits / seen as f64 },
            heldout_acc,
            id_head_v,
            id_head_p,
        };
        log::debug!("source epoch {epoch}: {rec:?}");
        report.epochs.push(rec);
    }
    Ok((bundle, report))
}

fn warm_start_estimators(
    bundle: &mut ModelBundle,
    train: &[&SubjectDataset],
    rows: &[(usize, usize)],
    seed: u64,
) -> Result<()> {
    let mut rng = stream(seed, "estimator/warm");
    let b = Batch::gather(train, rows);
    for m in Modality::ALL {
        let h = bundle.embed_values(m, batch_features(&b, m))?;
        bundle.branch_mut(m).estimator.warm_start(&h, &mut rng)?;
    }
    Ok(())
}

pub(crate) fn batch_features(b: &Batch, m: Modality) -> &Tensor {
    match m {
        Modality::Visual => &b.visual,
        Modality::Physio => &b.physio,
    }
}

struct StepOut {
    /// `[ce_v, ce_p, ce_fusion, ld_v, ld_p]`
    losses: [f64; 5],
    train_acc: f64,
}

fn source_step(
    bundle: &mut ModelBundle,
    b: &Batch,
    n_ids: usize,
    cfg: &TrainConfig,
    opt: &mut Sgd,
    id_opt: &mut Sgd,
) -> Result<StepOut> {
    let lambda_d = cfg.weights.disentangle;
    let codes = one_hot(&b.ids, n_ids)?;
    let mut g = Graph::new();
    let mut losses = [0.0; 5];
    let mut terms: Vec<Var> = Vec::new();
    let mut id_terms: Vec<Var> = Vec::new();
    let mut hs = Vec::with_capacity(2);
    for (k, m) in Modality::ALL.into_iter().enumerate() {
        let br = bundle.branch(m);
        let x = g.constant(batch_features(b, m));
        let h = embed(&br.backbone, &mut g, x)?;
        let logits = br.expr.classify(&mut g, h)?;
        let ce = cross_entropy(&mut g, logits, &b.labels)?;
        losses[k] = g.item(ce);
        terms.push(ce);
        if lambda_d > 0.0 {
            let ld = disentangle_loss(&br.estimator, &mut g, h, &codes)?;
            losses[3 + k] = g.item(ld);
            terms.push(g.scale(ld, lambda_d));
            if cfg.identity_aux_loss {
                let aux = uniform_identity_loss(bundle, m, &mut g, h)?;
                terms.push(g.scale(aux, lambda_d));
            }
        }
        let id_logits = br.identity.forward_detached(&mut g, h)?;
        id_terms.push(cross_entropy(&mut g, id_logits, &b.ids)?);
        hs.push(h);
    }
    let fused = fuse(&mut g, hs[0], hs[1])?;
    let flogits = bundle.fusion.classify(&mut g, fused)?;
    let fce = cross_entropy(&mut g, flogits, &b.labels)?;
    losses[2] = g.item(fce);
    let pred = argmax_rows(g.value(flogits), bundle.dims.n_classes);
    let train_acc = accuracy(&pred, &b.labels);
    terms.push(fce);
    terms.extend(id_terms);
    let total = sum_vars(&mut g, &terms)?;
    g.backward(total)?;

    let embeds: Vec<Tensor> = hs.iter().map(|&h| g.to_tensor(h)).collect();
    let mut trunk = trunk_params(bundle);
    g.write_grads(trunk.iter_mut().map(|t| &mut **t))?;
    opt.step(&mut trunk)?;
    let mut heads: Vec<&mut Tensor> = bundle.visual.identity.params_mut();
    heads.extend(bundle.physio.identity.params_mut());
    g.write_grads(heads.iter_mut().map(|t| &mut **t))?;
    id_opt.step(&mut heads)?;

    if lambda_d > 0.0 {
        for (m, h) in Modality::ALL.into_iter().zip(&embeds) {
            estimator_fit_step(&mut bundle.branch_mut(m).estimator, h, &codes)?;
        }
    }
    Ok(StepOut { losses, train_acc })
}

/// Cross-entropy toward the uniform identity distribution through a frozen
/// copy of the identity head, so only the embedding receives gradient.
fn uniform_identity_loss(bundle: &ModelBundle, m: Modality, g: &mut Graph, h: Var) -> Result<Var> {
    let mut head = bundle.branch(m).identity.clone();
    for p in head.params_mut() {
        p.set_requires_grad(false);
    }
    let logits = head.net.forward(g, h, "identity head")?;
    let n = g.shape(logits).iter().product::<usize>();
    let lp = g.log_softmax(logits);
    let s = g.sum(lp);
    Ok(g.scale(s, -1.0 / n as f64))
}

pub(crate) fn sum_vars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = g.scalar(0.0);
    for &t in terms {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Backbones, expression heads and the fusion head, in a fixed order.
pub(crate) fn trunk_params(bundle: &mut ModelBundle) -> Vec<&mut Tensor> {
    let ModelBundle {
        visual, physio, fusion, ..
    } = bundle;
    let mut v = visual.trunk_mut();
    v.extend(physio.trunk_mut());
    v.extend(fusion.params_mut());
    v
}

/// `(fusion accuracy, identity-head accuracy v, p)` on held-out source rows.
pub(crate) fn heldout_scores(bundle: &ModelBundle, set: &IdentitySet) -> Result<(f64, f64, f64)> {
    if set.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let pred = bundle.predict_fused(&set.visual, &set.physio)?;
    let acc = accuracy(&pred, &set.labels);
    let mut id = [0.0; 2];
    for (k, m) in Modality::ALL.into_iter().enumerate() {
        let h = bundle.embed_values(m, features(set, m))?;
        id[k] = identity_probe_accuracy(&bundle.branch(m).identity, &h, &set.ids)?;
    }
    Ok((acc, id[0], id[1]))
}

pub(crate) fn features(set: &IdentitySet, m: Modality) -> &Tensor {
    match m {
        Modality::Visual => &set.visual,
        Modality::Physio => &set.physio,
    }
}

