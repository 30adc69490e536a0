//! Co-training over the two modalities: choosing source subjects close to
//! the target, labelling confident target samples, and drawing class-aligned
//! batches.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::datagen::SubjectDataset;
use crate::error::{io_err, precondition, Error, Result};
use crate::model::ModelBundle;
use crate::nets::Modality;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Column means of a subject's embeddings.
pub fn subject_mean_embedding(bundle: &ModelBundle, subject: &SubjectDataset, m: Modality) -> Result<Vec<f64>> {
    if subject.is_empty() {
        return Err(precondition(format!("{}: no samples to embed", subject.subject_id)));
    }
    let h = bundle.embed_values(m, subject.features(m))?;
    Ok(column_mean(&h))
}

pub fn column_mean(h: &Tensor) -> Vec<f64> {
    let n = h.rows() as f64;
    let mut mean = vec![0.0; h.cols()];
    for i in 0..h.rows() {
        for (m, v) in mean.iter_mut().zip(h.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain {
            op: "cosine_similarity",
            detail: "zero vector".into(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Min-max scaling to `[0, 1]`; a constant input maps to all ones.
pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        log::warn!("similarity scores are all equal; every source normalises to 1.0");
        return vec![1.0; raw.len()];
    }
    raw.iter()
        .map(|v| if *v == hi { 1.0 } else { (v - lo) / (hi - lo) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityRow {
    pub subject_id: String,
    pub raw_v: f64,
    pub norm_v: f64,
    pub raw_p: f64,
    pub norm_p: f64,
    pub merged: f64,
}

/// Per-source similarity to one target, sorted by subject id.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    pub rows: Vec<SimilarityRow>,
}

impl SimilarityTable {
    /// Builds the table from raw per-modality scores.
    pub fn from_raw(ids: &[String], raw_v: &[f64], raw_p: &[f64]) -> Result<Self> {
        if ids.len() < 2 {
            return Err(precondition(format!("similarity table needs >= 2 sources, got {}", ids.len())));
        }
        if raw_v.len() != ids.len() || raw_p.len() != ids.len() {
            return Err(precondition("similarity table: score and id counts differ"));
        }
        let nv = min_max_normalize(raw_v);
        let np = min_max_normalize(raw_p);
        let mut rows: Vec<SimilarityRow> = (0..ids.len())
            .map(|i| SimilarityRow {
                subject_id: ids[i].clone(),
                raw_v: raw_v[i],
                norm_v: nv[i],
                raw_p: raw_p[i],
                norm_p: np[i],
                merged: nv[i].max(np[i]),
            })
            .collect();
        rows.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        Ok(Self { rows })
    }

    pub fn merged(&self, id: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.subject_id == id).map(|r| r.merged)
    }
}

/// Cosine similarity of subject-mean embeddings between each source and the
/// target, per modality, min-max normalised and merged by max.
pub fn build_similarity_table(
    bundle: &ModelBundle,
    sources: &[&SubjectDataset],
    target: &SubjectDataset,
) -> Result<SimilarityTable> {
    if sources.len() < 2 {
        return Err(precondition(format!(
            "similarity table needs >= 2 sources, got {}",
            sources.len()
        )));
    }
    let mut raw = [Vec::new(), Vec::new()];
    for (k, m) in Modality::ALL.into_iter().enumerate() {
        let t = subject_mean_embedding(bundle, target, m)?;
        for s in sources {
            let e = subject_mean_embedding(bundle, s, m)?;
            raw[k].push(cosine_similarity(&e, &t)?);
        }
    }
    let ids: Vec<String> = sources.iter().map(|s| s.subject_id.clone()).collect();
    SimilarityTable::from_raw(&ids, &raw[0], &raw[1])
}

/// Sources with merged score `≥ τ_ss`, best first; ties keep id order.
pub fn select_sources(table: &SimilarityTable, tau_ss: f64) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&tau_ss) {
        return Err(precondition(format!("tau_ss {tau_ss} outside [0, 1]")));
    }
    let mut keep: Vec<&SimilarityRow> = table.rows.iter().filter(|r| r.merged >= tau_ss).collect();
    keep.sort_by(|a, b| b.merged.total_cmp(&a.merged).then_with(|| a.subject_id.cmp(&b.subject_id)));
    Ok(keep.into_iter().map(|r| r.subject_id.clone()).collect())
}

/// CSV with one row per source: `subject_id,raw_v,norm_v,raw_p,norm_p,merged,selected`.
pub fn write_selection_report(table: &SimilarityTable, selected: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["subject_id", "raw_v", "norm_v", "raw_p", "norm_p", "merged", "selected"])
        .map_err(|e| csv_err(path, e))?;
    for r in &table.rows {
        let sel = if selected.contains(&r.subject_id) { "1" } else { "0" };
        w.write_record([
            r.subject_id.clone(),
            r.raw_v.to_string(),
            r.norm_v.to_string(),
            r.raw_p.to_string(),
            r.norm_p.to_string(),
            r.merged.to_string(),
            sel.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Parse {
            path: path.to_path_buf(),
            line: None,
            field: None,
            detail: format!("{other:?}"),
        },
    }
}

/// Reads the `subject_id` column of selected rows back from a report.
pub fn read_selection_report(path: &Path) -> Result<Vec<(String, f64, bool)>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "run `select` first".into(),
        });
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |field: &str| Error::Parse {
            path: path.to_path_buf(),
            line: Some(k + 1),
            field: Some(field.into()),
            detail: "malformed selection row".into(),
        };
        if f.len() != 7 {
            return Err(bad("selected"));
        }
        let merged: f64 = f[5].parse().map_err(|_| bad("merged"))?;
        out.push((f[0].to_string(), merged, f[6] == "1"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidentSample {
    /// Row in the target train split.
    pub index: usize,
    pub label: usize,
    pub modality: Modality,
    pub confidence: f64,
}

/// Split of the target train set into confidently pseudo-labelled samples
/// and the rest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelPartition {
    pub confident: Vec<ConfidentSample>,
    pub non_confident: Vec<usize>,
    pub classes: BTreeSet<usize>,
}

impl PseudoLabelPartition {
    pub fn len(&self) -> usize {
        self.confident.len() + self.non_confident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Confident rows grouped by pseudo-label.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for c in &self.confident {
            out.entry(c.label).or_default().push(c.index);
        }
        out
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        let map: BTreeMap<usize, usize> = self.confident.iter().map(|c| (c.index, c.label)).collect();
        idx.iter().map(|i| map[i]).collect()
    }
}

/// Per sample, the modality whose top class probability is larger wins
/// (visual on ties); the sample is confident when that probability is at
/// least `τ_pl`.
pub fn partition_from_probs(p_v: &Tensor, p_p: &Tensor, tau_pl: f64) -> Result<PseudoLabelPartition> {
    if !(0.0..=1.0).contains(&tau_pl) {
        return Err(precondition(format!("tau_pl {tau_pl} outside [0, 1]")));
    }
    if p_v.shape() != p_p.shape() {
        return Err(Error::ShapeMismatch {
            op: "pseudo_labels",
            left: p_v.shape().to_vec(),
            right: p_p.shape().to_vec(),
        });
    }
    if p_v.rows() == 0 {
        return Err(precondition("pseudo-labelling an empty target set"));
    }
    let top = |row: &[f64]| -> (usize, f64) {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
    };
    let mut out = PseudoLabelPartition::default();
    for i in 0..p_v.rows() {
        let (cv, sv) = top(p_v.row(i));
        let (cp, sp) = top(p_p.row(i));
        let (label, conf, modality) = if sv >= sp {
            (cv, sv, Modality::Visual)
        } else {
            (cp, sp, Modality::Physio)
        };
        if conf >= tau_pl {
            out.confident.push(ConfidentSample {
                index: i,
                label,
                modality,
                confidence: conf,
            });
            out.classes.insert(label);
        } else {
            out.non_confident.push(i);
        }
    }
    Ok(out)
}

pub fn generate_pseudo_labels(
    bundle: &ModelBundle,
    target_train: &SubjectDataset,
    tau_pl: f64,
) -> Result<PseudoLabelPartition> {
    if target_train.is_empty() {
        return Err(precondition("pseudo-labelling an empty target set"));
    }
    let pv = bundle.modality_probs(Modality::Visual, &target_train.visual)?;
    let pp = bundle.modality_probs(Modality::Physio, &target_train.physio)?;
    partition_from_probs(&pv, &pp, tau_pl)
}

/// A shuffled pool drawn without replacement until exhausted, then
/// reshuffled.
#[derive(Debug, Clone)]
pub struct Pool {
    items: Vec<usize>,
    pos: usize,
}

impl Pool {
    pub fn new(mut items: Vec<usize>, rng: &mut Rng) -> Self {
        items.shuffle(rng);
        Self { items, pos: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn reshuffle(&mut self, rng: &mut Rng) {
        self.items.shuffle(rng);
        self.pos = 0;
    }

    /// Up to `k` distinct items.
    pub fn draw(&mut self, k: usize, rng: &mut Rng) -> Vec<usize> {
        let k = k.min(self.items.len());
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.items.len() {
                let taken: BTreeSet<usize> = out.iter().copied().collect();
                self.reshuffle(rng);
                // Items already drawn in this call go to the back.
                let (mut fresh, used): (Vec<usize>, Vec<usize>) =
                    self.items.iter().partition(|i| !taken.contains(i));
                fresh.extend(used);
                self.items = fresh;
            }
            out.push(self.items[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Rows drawn for one class: per source (empty when the source lacks the
/// class) and from the target's confident samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassDraw {
    pub sources: Vec<Vec<usize>>,
    pub target: Vec<usize>,
}

pub type BatchPlan = BTreeMap<usize, ClassDraw>;

/// Keeps per-(domain, class) pools across steps so that each epoch walks
/// every pool without replacement.
#[derive(Debug, Clone)]
pub struct ClassAwareSampler {
    k: usize,
    sources: Vec<BTreeMap<usize, Pool>>,
    target: BTreeMap<usize, Pool>,
}

impl ClassAwareSampler {
    pub fn new(sources: &[&SubjectDataset], partition: &PseudoLabelPartition, k: usize, rng: &mut Rng) -> Self {
        let classes = &partition.classes;
        let sources = sources
            .iter()
            .map(|s| {
                classes
                    .iter()
                    .filter_map(|&c| {
                        let idx = s.indices_of_class(c);
                        (!idx.is_empty()).then(|| (c, Pool::new(idx, rng)))
                    })
                    .collect()
            })
            .collect();
        let target = partition
            .by_class()
            .into_iter()
            .map(|(c, idx)| (c, Pool::new(idx, rng)))
            .collect();
        Self { k, sources, target }
    }

    pub fn new_epoch(&mut self, rng: &mut Rng) {
        for p in self.sources.iter_mut().flat_map(|m| m.values_mut()) {
            p.reshuffle(rng);
        }
        for p in self.target.values_mut() {
            p.reshuffle(rng);
        }
    }

    /// `None` when no class is confident, which tells the caller to skip the
    /// class-aware term for this step.
    pub fn sample(&mut self, rng: &mut Rng) -> Option<BatchPlan> {
        if self.target.is_empty() {
            return None;
        }
        let k = self.k;
        let mut plan = BatchPlan::new();
        for (&c, tpool) in self.target.iter_mut() {
            let sources = self
                .sources
                .iter_mut()
                .map(|m| m.get_mut(&c).map_or_else(Vec::new, |p| p.draw(k, rng)))
                .collect();
            plan.insert(
                c,
                ClassDraw {
                    sources,
                    target: tpool.draw(k, rng),
                },
            );
        }
        Some(plan)
    }
}

/// One class-aware batch from fresh pools.
pub fn class_aware_sample(
    sources: &[&SubjectDataset],
    partition: &PseudoLabelPartition,
    k: usize,
    rng: &mut Rng,
) -> Option<BatchPlan> {
    ClassAwareSampler::new(sources, partition, k, rng).sample(rng)
}
