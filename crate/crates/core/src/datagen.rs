//! Synthetic multimodal multi-subject benchmark and its on-disk format.
//!
//! Subjects are domains. Each belongs to a group whose class prototypes are a
//! perturbed copy of global prototypes; each subject then applies its own
//! affine shift, a constant identity offset and per-modality noise. Half the
//! subjects have a clean visual view and a noisy physiological one, the other
//! half the reverse. Optional distractor sources live in a far group whose
//! class prototypes are permuted.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, precondition, Error, Result};
use crate::nets::Modality;
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub n_classes: usize,
    pub n_source_subjects: usize,
    pub n_target_subjects: usize,
    pub samples_per_subject: usize,
    pub dim_visual: usize,
    pub dim_physio: usize,
    pub n_groups: usize,
    /// Standard deviation of the global class prototypes.
    pub class_sep: f64,
    /// Per-group perturbation of the class prototypes.
    pub group_spread: f64,
    /// Per-group offset shared by all of a group's classes.
    pub group_offset: f64,
    /// Magnitude of each subject's random affine map and translation.
    pub shift_strength: f64,
    /// Length of each subject's constant identity direction.
    pub identity_leak: f64,
    /// Per-subject, per-class translation, in units of the typical prototype
    /// norm `class_sep·√d`. Each class draws its length uniformly in
    /// `[0, class_shift]`, independently per modality.
    pub class_shift: f64,
    /// Noise scale of a subject's reliable modality.
    pub noise: f64,
    /// The unreliable modality's noise is `noise · reliability_contrast`.
    pub reliability_contrast: f64,
    /// The unreliable modality's affine shift and translation are scaled by
    /// this factor.
    pub unreliable_shift: f64,
    /// Class imbalance of target subjects: class proportions are
    /// `∝ exp(−label_skew · rank)` over a random per-target ranking of the
    /// classes. Sources stay balanced.
    pub label_skew: f64,
    /// Sources placed in a far group with permuted class prototypes.
    pub n_distractors: usize,
    /// Offset of the distractor group, in units of `class_sep`.
    pub distractor_offset: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_source_subjects: 12,
            n_target_subjects: 3,
            samples_per_subject: 200,
            dim_visual: 24,
            dim_physio: 12,
            n_groups: 3,
            class_sep: 1.0,
            group_spread: 0.5,
            group_offset: 1.0,
            shift_strength: 0.5,
            identity_leak: 1.0,
            class_shift: 0.0,
            noise: 0.5,
            reliability_contrast: 3.0,
            unreliable_shift: 2.0,
            label_skew: 0.0,
            n_distractors: 1,
            distractor_offset: 1.0,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(precondition(format!("benchmark spec: {m}")));
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2".into());
        }
        if self.n_source_subjects < 4 {
            return bad("n_source_subjects must be >= 4".into());
        }
        if self.n_target_subjects < 1 {
            return bad("n_target_subjects must be >= 1".into());
        }
        if self.samples_per_subject < 4 * self.n_classes {
            return bad(format!("samples_per_subject must be >= {}", 4 * self.n_classes));
        }
        if self.n_groups < 2 {
            return bad("n_groups must be >= 2".into());
        }
        if self.dim_visual == 0 || self.dim_physio == 0 {
            return bad("feature dims must be >= 1".into());
        }
        let mags = [
            ("class_sep", self.class_sep),
            ("group_spread", self.group_spread),
            ("group_offset", self.group_offset),
            ("shift_strength", self.shift_strength),
            ("identity_leak", self.identity_leak),
            ("class_shift", self.class_shift),
            ("noise", self.noise),
            ("distractor_offset", self.distractor_offset),
            ("label_skew", self.label_skew),
        ];
        for (k, v) in mags {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be a finite value >= 0"));
            }
        }
        if !(self.reliability_contrast >= 1.0) {
            return bad("reliability_contrast must be >= 1".into());
        }
        if !(self.unreliable_shift >= 0.0 && self.unreliable_shift.is_finite()) {
            return bad("unreliable_shift must be a finite value >= 0".into());
        }
        if self.n_distractors >= self.n_source_subjects {
            return bad("n_distractors must leave at least one regular source".into());
        }
        if self.feasible_groups().is_empty() {
            return bad("no group has the 3 regular sources a target needs".into());
        }
        Ok(())
    }

    fn regular_sources(&self) -> usize {
        self.n_source_subjects - self.n_distractors
    }

    fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups];
        for i in 0..self.regular_sources() {
            sizes[i % self.n_groups] += 1;
        }
        sizes
    }

    fn feasible_groups(&self) -> Vec<usize> {
        self.group_sizes()
            .iter()
            .enumerate()
            .filter(|(_, n)| **n >= 3)
            .map(|(g, _)| g)
            .collect()
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.dim_visual,
            Modality::Physio => self.dim_physio,
        }
    }
}

/// One subject's samples. Both modalities are present for every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDataset {
    pub subject_id: String,
    pub role: Role,
    /// Position among the source subjects (sources) or `D + position`
    /// (targets); constant for every sample of the subject.
    pub identity: usize,
    pub meta: SubjectMeta,
    /// `[N, d_v]`
    pub visual: Tensor,
    /// `[N, d_p]`
    pub physio: Tensor,
    pub labels: Vec<usize>,
}

/// Generator facts kept next to the samples; absent for external data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_visual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_physio: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub distractor: bool,
}

impl SubjectDataset {
    pub fn new(
        subject_id: impl Into<String>,
        role: Role,
        identity: usize,
        visual: Tensor,
        physio: Tensor,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let s = Self {
            subject_id: subject_id.into(),
            role,
            identity,
            meta: SubjectMeta::default(),
            visual,
            physio,
            labels,
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        let n = self.labels.len();
        if self.visual.shape().len() != 2 || self.physio.shape().len() != 2 {
            return Err(precondition(format!("{}: features must be matrices", self.subject_id)));
        }
        if self.visual.rows() != n || self.physio.rows() != n {
            return Err(precondition(format!(
                "{}: {} labels but {} visual and {} physio rows",
                self.subject_id,
                n,
                self.visual.rows(),
                self.physio.rows()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Visual => &self.visual,
            Modality::Physio => &self.physio,
        }
    }

    /// Rows `idx`, in that order, keeping subject metadata.
    pub fn subset(&self, idx: &[usize]) -> SubjectDataset {
        SubjectDataset {
            subject_id: self.subject_id.clone(),
            role: self.role,
            identity: self.identity,
            meta: self.meta.clone(),
            visual: self.visual.select_rows(idx),
            physio: self.physio.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn indices_of_class(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }
}

fn randn_vec(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v = randn_vec(n, 1.0, rng);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Per-modality generative state of one subject.
struct SubjectView {
    /// `I + shift · G / √d`, row-major `d × d`.
    mix: Vec<f64>,
    offset: Vec<f64>,
    /// Per-class translation `[class] → vector`.
    class_offsets: Vec<Vec<f64>>,
    noise: f64,
}

impl SubjectView {
    fn new(d: usize, spec: &BenchmarkSpec, reliable: bool, rng: &mut Rng) -> Self {
        let (noise, strength) = if reliable {
            (spec.noise, spec.shift_strength)
        } else {
            (
                spec.noise * spec.reliability_contrast,
                spec.shift_strength * spec.unreliable_shift,
            )
        };
        let g = randn_vec(d * d, strength / (d as f64).sqrt(), rng);
        let mut mix = g;
        for i in 0..d {
            mix[i * d + i] += 1.0;
        }
        let shift = randn_vec(d, strength, rng);
        let id_dir = unit_vec(d, rng);
        let offset = shift
            .iter()
            .zip(&id_dir)
            .map(|(s, u)| s + spec.identity_leak * u)
            .collect();
        let scale = spec.class_shift * spec.class_sep * (d as f64).sqrt();
        let class_offsets = (0..spec.n_classes)
            .map(|_| {
                let len = scale * rng.random::<f64>();
                unit_vec(d, rng).into_iter().map(|u| len * u).collect()
            })
            .collect();
        Self {
            mix,
            offset,
            class_offsets,
            noise,
        }
    }

    fn sample(&self, proto: &[f64], class: usize, rng: &mut Rng) -> Vec<f64> {
        let d = proto.len();
        let shift = &self.class_offsets[class];
        (0..d)
            .map(|i| {
                let lin: f64 = (0..d).map(|j| self.mix[i * d + j] * proto[j]).sum();
                lin + self.offset[i] + shift[i] + self.noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }
}

/// Class prototypes of every group, per modality: `[group][class] → vector`.
type Prototypes = Vec<Vec<Vec<f64>>>;

fn prototypes(spec: &BenchmarkSpec, d: usize, rng: &mut Rng) -> Prototypes {
    let c = spec.n_classes;
    let global: Vec<Vec<f64>> = (0..c).map(|_| randn_vec(d, spec.class_sep, rng)).collect();
    let mut groups: Prototypes = (0..spec.n_groups)
        .map(|_| {
            let off = randn_vec(d, spec.group_offset, rng);
            global
                .iter()
                .map(|p| {
                    let pert = randn_vec(d, spec.group_spread, rng);
                    p.iter().zip(&off).zip(&pert).map(|((a, b), e)| a + b + e).collect()
                })
                .collect()
        })
        .collect();
    // Far group: class c looks like global class c+1, shifted away.
    let off = randn_vec(d, spec.distractor_offset * spec.class_sep, rng);
    groups.push(
        (0..c)
            .map(|k| global[(k + 1) % c].iter().zip(&off).map(|(a, b)| a + b).collect())
            .collect(),
    );
    groups
}

/// `n` labels whose class counts follow `exp(−skew · rank)` for a random
/// class ranking; every class keeps at least 4 samples.
fn skewed_labels(n: usize, c: usize, skew: f64, rng: &mut Rng) -> Vec<usize> {
    let mut rank: Vec<usize> = (0..c).collect();
    rank.shuffle(rng);
    let w: Vec<f64> = rank.iter().map(|&r| (-skew * r as f64).exp()).collect();
    let total: f64 = w.iter().sum();
    let floor = 4;
    let spare = n - floor * c;
    let mut counts: Vec<usize> = w.iter().map(|x| floor + (spare as f64 * x / total).floor() as usize).collect();
    let mut k = 0;
    while counts.iter().sum::<usize>() < n {
        counts[rank.iter().position(|&r| r == k % c).unwrap_or(0)] += 1;
        k += 1;
    }
    counts.iter().enumerate().flat_map(|(y, &m)| std::iter::repeat_n(y, m)).collect()
}

/// Draws every subject of the benchmark, sources first (`s00`, `s01`, …)
/// then targets (`t00`, …).
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Vec<SubjectDataset>> {
    spec.validate()?;
    let mut rng = stream(spec.seed, "benchmark");
    let protos_v = prototypes(spec, spec.dim_visual, &mut rng);
    let protos_p = prototypes(spec, spec.dim_physio, &mut rng);
    let far = spec.n_groups;
    let d_src = spec.n_source_subjects;

    let mut plan: Vec<(String, Role, usize, usize, bool)> = Vec::new();
    for i in 0..d_src {
        let regular = i < spec.regular_sources();
        let group = if regular { i % spec.n_groups } else { far };
        plan.push((format!("s{i:02}"), Role::Source, i, group, !regular));
    }
    let feasible = spec.feasible_groups();
    for t in 0..spec.n_target_subjects {
        let group = feasible[t % feasible.len()];
        plan.push((format!("t{t:02}"), Role::Target, d_src + t, group, false));
    }

    let mut out = Vec::with_capacity(plan.len());
    for (k, (id, role, identity, group, distractor)) in plan.into_iter().enumerate() {
        let mut srng = stream(spec.seed, &format!("subject/{id}"));
        let visual_reliable = k % 2 == 0;
        let view_v = SubjectView::new(spec.dim_visual, spec, visual_reliable, &mut srng);
        let view_p = SubjectView::new(spec.dim_physio, spec, !visual_reliable, &mut srng);
        let (nv, np) = (view_v.noise, view_p.noise);
        let n = spec.samples_per_subject;
        let mut labels = if role == Role::Target && spec.label_skew > 0.0 {
            skewed_labels(n, spec.n_classes, spec.label_skew, &mut srng)
        } else {
            (0..n).map(|i| i % spec.n_classes).collect()
        };
        labels.shuffle(&mut srng);
        let mut v = Vec::with_capacity(n * spec.dim_visual);
        let mut p = Vec::with_capacity(n * spec.dim_physio);
        for &y in &labels {
            v.extend(view_v.sample(&protos_v[group][y], y, &mut srng));
            p.extend(view_p.sample(&protos_p[group][y], y, &mut srng));
        }
        let mut s = SubjectDataset::new(
            id,
            role,
            identity,
            Tensor::new(vec![n, spec.dim_visual], v)?,
            Tensor::new(vec![n, spec.dim_physio], p)?,
            labels,
        )?;
        s.meta = SubjectMeta {
            group: Some(group),
            noise_visual: Some(nv),
            noise_physio: Some(np),
            distractor,
        };
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    subject_id: String,
    role: Role,
    identity: usize,
    #[serde(flatten)]
    extra: SubjectMeta,
}

/// Dataset-level manifest listing subjects in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n_classes: usize,
    pub dim_visual: usize,
    pub dim_physio: usize,
    pub subjects: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<BenchmarkSpec>,
}

pub const MANIFEST_FILE: &str = "dataset.json";
const META_FILE: &str = "meta.json";
const SAMPLES_FILE: &str = "samples.csv";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| precondition(format!("serialise {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn header(dv: usize, dp: usize) -> Vec<String> {
    let mut h = vec!["y".to_string(), "ý".to_string()];
    h.extend((0..dv).map(|i| format!("v_{i}")));
    h.extend((0..dp).map(|i| format!("p_{i}")));
    h
}

/// Writes `dir/dataset.json` and one `dir/<subject_id>/` directory per
/// subject holding `meta.json` and `samples.csv`.
pub fn write_dataset(
    subjects: &[SubjectDataset],
    n_classes: usize,
    spec: Option<&BenchmarkSpec>,
    dir: &Path,
) -> Result<()> {
    let first = subjects.first().ok_or_else(|| precondition("write_dataset: no subjects"))?;
    let (dim_visual, dim_physio) = (first.visual.cols(), first.physio.cols());
    if subjects.iter().any(|s| s.visual.cols() != dim_visual || s.physio.cols() != dim_physio) {
        return Err(precondition("write_dataset: subjects disagree on feature dims"));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        n_classes,
        dim_visual,
        dim_physio,
        subjects: subjects.iter().map(|s| s.subject_id.clone()).collect(),
        spec: spec.cloned(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    for s in subjects {
        let sdir = dir.join(&s.subject_id);
        fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
        write_json(
            &sdir.join(META_FILE),
            &MetaFile {
                subject_id: s.subject_id.clone(),
                role: s.role,
                identity: s.identity,
                extra: s.meta.clone(),
            },
        )?;
        let path = sdir.join(SAMPLES_FILE);
        let (dv, dp) = (s.visual.cols(), s.physio.cols());
        let mut buf = String::new();
        buf.push_str(&header(dv, dp).join(","));
        buf.push('\n');
        for i in 0..s.len() {
            let mut row: Vec<String> = vec![s.labels[i].to_string(), s.identity.to_string()];
            row.extend(s.visual.row(i).iter().map(|v| v.to_string()));
            row.extend(s.physio.row(i).iter().map(|v| v.to_string()));
            buf.push_str(&row.join(","));
            buf.push('\n');
        }
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(buf.as_bytes()).map_err(io_err(&path))?;
    }
    Ok(())
}

fn parse_err(path: &Path, line: Option<usize>, field: Option<&str>, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        field: field.map(str::to_string),
        detail: detail.into(),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "run `gen-data` or point --data at a dataset directory".into(),
        });
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, Some(e.line()), None, e.to_string()))
}

fn read_samples(path: &Path, meta: &MetaFile, manifest: &Manifest) -> Result<SubjectDataset> {
    let n_classes = manifest.n_classes;
    let (dv, dp) = (manifest.dim_visual, manifest.dim_physio);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => parse_err(path, None, None, format!("{other:?}")),
        })?;
    let head: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(path, Some(1), None, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let expect = header(dv, dp);
    for col in &expect {
        if !head.contains(col) {
            return Err(parse_err(path, Some(1), Some(col), "missing column"));
        }
    }
    if head != expect {
        let odd = head.iter().find(|h| !expect.contains(h)).cloned();
        return Err(parse_err(
            path,
            Some(1),
            odd.as_deref(),
            format!("header must be `{}`", expect.join(",")),
        ));
    }
    let mut labels = Vec::new();
    let mut v = Vec::new();
    let mut p = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| parse_err(path, Some(line), None, e.to_string()))?;
        if rec.len() != expect.len() {
            return Err(parse_err(
                path,
                Some(line),
                None,
                format!("expected {} fields, found {}", expect.len(), rec.len()),
            ));
        }
        let int = |j: usize| -> Result<usize> {
            rec[j]
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(path, Some(line), Some(&expect[j]), e.to_string()))
        };
        let y = int(0)?;
        if y >= n_classes {
            return Err(parse_err(path, Some(line), Some("y"), format!("label {y} >= n_classes {n_classes}")));
        }
        let id = int(1)?;
        if id != meta.identity {
            return Err(parse_err(
                path,
                Some(line),
                Some("ý"),
                format!("identity {id} differs from subject identity {}", meta.identity),
            ));
        }
        labels.push(y);
        for j in 2..expect.len() {
            let x: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse_err(path, Some(line), Some(&expect[j]), e.to_string()))?;
            if !x.is_finite() {
                return Err(parse_err(path, Some(line), Some(&expect[j]), "non-finite value"));
            }
            if j < 2 + dv {
                v.push(x);
            } else {
                p.push(x);
            }
        }
    }
    let n = labels.len();
    let mut s = SubjectDataset::new(
        meta.subject_id.clone(),
        meta.role,
        meta.identity,
        Tensor::new(vec![n, dv], v)?,
        Tensor::new(vec![n, dp], p)?,
        labels,
    )?;
    s.meta = meta.extra.clone();
    Ok(s)
}

/// A dataset loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub subjects: Vec<SubjectDataset>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes
    }

    pub fn sources(&self) -> Vec<&SubjectDataset> {
        self.subjects.iter().filter(|s| s.role == Role::Source).collect()
    }

    pub fn targets(&self) -> Vec<&SubjectDataset> {
        self.subjects.iter().filter(|s| s.role == Role::Target).collect()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectDataset> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for id in &manifest.subjects {
        let sdir: PathBuf = dir.join(id);
        let meta: MetaFile = read_json(&sdir.join(META_FILE))?;
        if &meta.subject_id != id {
            return Err(parse_err(
                &sdir.join(META_FILE),
                None,
                Some("subject_id"),
                format!("expected `{id}`, found `{}`", meta.subject_id),
            ));
        }
        subjects.push(read_samples(&sdir.join(SAMPLES_FILE), &meta, &manifest)?);
    }
    Ok(Dataset { manifest, subjects })
}

/// Disjoint index sets with sizes proportional to `fractions`, stratified by
/// label. Falls back to an unstratified split when some class has fewer than
/// 3 samples.
pub fn split_indices(labels: &[usize], fractions: &[f64], rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(precondition(format!("split fractions {fractions:?} must be >= 0")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(precondition(format!("split fractions {fractions:?} must sum to 1")));
    }
    let n = labels.len();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let stratify = by_class.iter().all(|c| c.is_empty() || c.len() >= 3);
    // Each sample gets a key in (0, 1); classes are spread evenly over the
    // key range, so every prefix of the sorted order is near-proportional.
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n);
    if stratify {
        for members in by_class.iter_mut() {
            members.shuffle(rng);
            let m = members.len() as f64;
            let jitter: f64 = rng.random_range(0.0..1.0);
            for (r, &i) in members.iter().enumerate() {
                keyed.push(((r as f64 + 0.25 + 0.5 * jitter) / m, i));
            }
        }
    } else {
        log::warn!("split: a class has fewer than 3 samples, splitting without stratification");
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        keyed.extend(idx.into_iter().enumerate().map(|(r, i)| ((r as f64 + 0.5) / n as f64, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64).round() as usize).collect();
    let assigned: usize = sizes[..sizes.len() - 1].iter().sum::<usize>().min(n);
    let last = sizes.len() - 1;
    sizes[last] = n - assigned;
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        let end = (start + s).min(n);
        let mut part: Vec<usize> = keyed[start..end].iter().map(|(_, i)| *i).collect();
        part.sort_unstable();
        out.push(part);
        start = end;
    }
    Ok(out)
}

/// A target subject split for training, model selection and final scoring.
#[derive(Debug, Clone)]
pub struct TargetSplit {
    pub train: SubjectDataset,
    pub val: SubjectDataset,
    pub test: SubjectDataset,
}

pub const TARGET_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

pub fn split_target(subject: &SubjectDataset, fractions: [f64; 3], seed: u64) -> Result<TargetSplit> {
    let mut rng = stream(seed, &format!("split/{}", subject.subject_id));
    let parts = split_indices(&subject.labels, &fractions, &mut rng)?;
    Ok(TargetSplit {
        train: subject.subset(&parts[0]),
        val: subject.subset(&parts[1]),
        test: subject.subset(&parts[2]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkSpec {
        BenchmarkSpec {
            samples_per_subject: 40,
            dim_visual: 5,
            dim_physio: 3,
            ..BenchmarkSpec::default()
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let cases = [
            BenchmarkSpec { n_classes: 1, ..small() },
            BenchmarkSpec { n_source_subjects: 3, ..small() },
            BenchmarkSpec { samples_per_subject: 15, ..small() },
            BenchmarkSpec { n_groups: 1, ..small() },
            BenchmarkSpec { noise: -1.0, ..small() },
            BenchmarkSpec { n_groups: 6, ..small() },
            BenchmarkSpec { n_distractors: 12, ..small() },
        ];
        for c in cases {
            assert!(generate_benchmark(&c).is_err(), "{c:?}");
        }
    }

    #[test]
    fn layout_and_labels() {
        let spec = small();
        let subs = generate_benchmark(&spec).unwrap();
        assert_eq!(subs.len(), 15);
        for (i, s) in subs.iter().enumerate() {
            assert_eq!(s.len(), 40);
            assert!(s.labels.iter().all(|&y| y < 4));
            assert_eq!(s.identity, i);
            assert_eq!(s.visual.shape(), &[40, 5]);
            assert_eq!(s.physio.shape(), &[40, 3]);
            for c in 0..4 {
                assert_eq!(s.indices_of_class(c).len(), 10);
            }
        }
        assert_eq!(subs.iter().filter(|s| s.role == Role::Target).count(), 3);
    }

    #[test]
    fn targets_have_three_same_group_sources_and_a_far_one() {
        for distractors in [0, 4] {
            let spec = BenchmarkSpec { n_distractors: distractors, ..small() };
            let subs = generate_benchmark(&spec).unwrap();
            for t in subs.iter().filter(|s| s.role == Role::Target) {
                let same = subs
                    .iter()
                    .filter(|s| s.role == Role::Source && s.meta.group == t.meta.group)
                    .count();
                let far = subs
                    .iter()
                    .filter(|s| s.role == Role::Source && s.meta.group != t.meta.group)
                    .count();
                assert!(same >= 3 && far >= 1, "{} {same} {far}", t.subject_id);
            }
            let n_distr = subs.iter().filter(|s| s.meta.distractor).count();
            assert_eq!(n_distr, distractors);
        }
    }

    #[test]
    fn both_reliability_kinds_among_targets() {
        let subs = generate_benchmark(&BenchmarkSpec::default()).unwrap();
        let t: Vec<_> = subs.iter().filter(|s| s.role == Role::Target).collect();
        assert!(t.iter().any(|s| s.meta.noise_visual < s.meta.noise_physio));
        assert!(t.iter().any(|s| s.meta.noise_visual > s.meta.noise_physio));
    }

    #[test]
    fn no_shift_limit_makes_subjects_identical_in_distribution() {
        let spec = BenchmarkSpec {
            group_spread: 0.0,
            group_offset: 0.0,
            shift_strength: 0.0,
            identity_leak: 0.0,
            noise: 0.0,
            n_distractors: 0,
            ..small()
        };
        let subs = generate_benchmark(&spec).unwrap();
        let reference: Vec<Vec<f64>> = (0..4)
            .map(|c| {
                let i = subs[0].indices_of_class(c)[0];
                subs[0].visual.row(i).to_vec()
            })
            .collect();
        for s in &subs {
            for i in 0..s.len() {
                assert_eq!(s.visual.row(i), reference[s.labels[i]].as_slice());
            }
        }
    }

    #[test]
    fn label_skew_imbalances_targets_only() {
        let spec = BenchmarkSpec { label_skew: 1.0, ..small() };
        let subs = generate_benchmark(&spec).unwrap();
        for s in &subs {
            let counts: Vec<usize> = (0..4).map(|c| s.indices_of_class(c).len()).collect();
            assert_eq!(counts.iter().sum::<usize>(), 40);
            assert!(counts.iter().all(|&n| n >= 4), "{counts:?}");
            let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
            match s.role {
                Role::Source => assert_eq!(spread, 0),
                Role::Target => assert!(spread >= 4, "{counts:?}"),
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_benchmark(&small()).unwrap();
        let b = generate_benchmark(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_benchmark(&BenchmarkSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn files_round_trip_and_are_reproducible() {
        let spec = small();
        let subs = generate_benchmark(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&subs, 4, Some(&spec), dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.subjects, subs);
        assert_eq!(back.manifest.spec.as_ref(), Some(&spec));
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&subs, 4, Some(&spec), dir2.path()).unwrap();
        let a = fs::read(dir.path().join("s03").join(SAMPLES_FILE)).unwrap();
        let b = fs::read(dir2.path().join("s03").join(SAMPLES_FILE)).unwrap();
        assert_eq!(a, b);
        let head = String::from_utf8(a).unwrap();
        assert!(head.starts_with("y,ý,v_0,v_1,v_2,v_3,v_4,p_0,p_1,p_2\n"));
    }

    fn corrupt(edit: impl Fn(&str) -> String) -> Error {
        let spec = small();
        let subs = generate_benchmark(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&subs, 4, None, dir.path()).unwrap();
        let path = dir.path().join("s01").join(SAMPLES_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, edit(&text)).unwrap();
        read_dataset(dir.path()).unwrap_err()
    }

    #[test]
    fn missing_column_is_named() {
        let e = corrupt(|t| t.replacen("p_2", "q_2", 1));
        let msg = e.to_string();
        assert!(matches!(e, Error::Parse { line: Some(1), .. }), "{msg}");
        assert!(msg.contains("p_2"), "{msg}");
    }

    #[test]
    fn truncated_row_reports_line() {
        let e = corrupt(|t| {
            let mut lines: Vec<String> = t.lines().map(str::to_string).collect();
            let cut = lines[3].rfind(',').unwrap();
            lines[3].truncate(cut);
            lines.join("\n") + "\n"
        });
        assert!(matches!(e, Error::Parse { line: Some(4), .. }), "{e}");
    }

    #[test]
    fn bad_number_names_field() {
        let e = corrupt(|t| {
            let mut lines: Vec<String> = t.lines().map(str::to_string).collect();
            let mut f: Vec<String> = lines[2].split(',').map(str::to_string).collect();
            f[3] = "abc".into();
            lines[2] = f.join(",");
            lines.join("\n") + "\n"
        });
        match e {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, Some(3));
                assert_eq!(field.as_deref(), Some("v_1"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn missing_dataset_is_an_artifact_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::MissingArtifact { .. })));
    }

    fn labels(n: usize, c: usize) -> Vec<usize> {
        (0..n).map(|i| i % c).collect()
    }

    #[test]
    fn stratified_split_counts() {
        let y = labels(100, 4);
        let parts = split_indices(&y, &[0.6, 0.2, 0.2], &mut stream(0, "s")).unwrap();
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![60, 20, 20]);
        for (part, f) in parts.iter().zip([0.6, 0.2, 0.2]) {
            for c in 0..4 {
                let k = part.iter().filter(|&&i| y[i] == c).count() as f64;
                assert!((k - 25.0 * f).abs() <= 1.0, "class {c}: {k}");
            }
        }
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_fractions_and_fallback() {
        let y = labels(20, 4);
        let parts = split_indices(&y, &[1.0, 0.0, 0.0], &mut stream(0, "s")).unwrap();
        assert_eq!(parts[0].len(), 20);
        assert!(parts[1].is_empty() && parts[2].is_empty());
        let mut y = labels(20, 4);
        y[0] = 4;
        let parts = split_indices(&y, &[0.5, 0.5], &mut stream(0, "s")).unwrap();
        assert_eq!(parts[0].len() + parts[1].len(), 20);
        assert!(split_indices(&y, &[0.5, 0.6], &mut stream(0, "s")).is_err());
    }

    #[test]
    fn target_split_is_seeded() {
        let subs = generate_benchmark(&small()).unwrap();
        let t = &subs[13];
        let a = split_target(t, TARGET_FRACTIONS, 3).unwrap();
        let b = split_target(t, TARGET_FRACTIONS, 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), t.len());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_is_a_partition(n in 12usize..120, c in 2usize..5, seed in 0u64..1000) {
                let y = labels(n, c);
                let parts = split_indices(&y, &[0.6, 0.2, 0.2], &mut stream(seed, "p")).unwrap();
                let mut all: Vec<usize> = parts.concat();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
