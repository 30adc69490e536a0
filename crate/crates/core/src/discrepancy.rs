//! Kernel two-sample discrepancies used for source/target alignment.
//!
//! The workhorse is [`mmd2`], the biased (V-statistic) squared maximum mean
//! discrepancy under a sum of Gaussian kernels. Bandwidths are multiples of a
//! base bandwidth, normally the median pairwise distance of the pooled sample.
//! On top of it sit the class-aware terms (same class pulled together,
//! different classes pushed apart) and the class-agnostic term for target
//! samples that have no trusted label.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

pub const DEFAULT_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub base_bandwidth: f64,
    pub scales: Vec<f64>,
}

impl KernelSpec {
    pub fn new(base_bandwidth: f64, scales: Vec<f64>) -> Result<Self> {
        if !(base_bandwidth > 0.0 && base_bandwidth.is_finite()) {
            return Err(precondition(format!("kernel bandwidth {base_bandwidth} must be > 0")));
        }
        if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(precondition(format!("kernel scales {scales:?} must be non-empty and > 0")));
        }
        Ok(Self {
            base_bandwidth,
            scales,
        })
    }

    pub fn single(bandwidth: f64) -> Result<Self> {
        Self::new(bandwidth, vec![1.0])
    }

    pub fn bandwidths(&self) -> Vec<f64> {
        self.scales.iter().map(|s| s * self.base_bandwidth).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled pair, recomputed per call.
    Median,
    Fixed(f64),
}

/// How alignment terms build their kernel for each pair of sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmdConfig {
    pub scales: Vec<f64>,
    pub bandwidth: Bandwidth,
    /// Use `sqrt(mmd² + 1e-12)` instead of `mmd²`.
    pub sqrt: bool,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            bandwidth: Bandwidth::Median,
            sqrt: false,
        }
    }
}

const SQRT_EPS: f64 = 1e-12;

impl MmdConfig {
    fn kernel_for(&self, g: &Graph, x: Var, y: Var) -> Result<KernelSpec> {
        let base = match self.bandwidth {
            Bandwidth::Fixed(b) => b,
            Bandwidth::Median => {
                let d = g.shape(x).get(1).copied().unwrap_or(1);
                median_bandwidth_raw(g.value(x), g.value(y), d)?
            }
        };
        KernelSpec::new(base, self.scales.clone())
    }

    /// Discrepancy between two embedding sets under this configuration.
    pub fn discrepancy(&self, g: &mut Graph, x: Var, y: Var) -> Result<Var> {
        let k = self.kernel_for(g, x, y)?;
        let m = mmd2(g, x, y, &k)?;
        if self.sqrt {
            let eps = g.scalar(SQRT_EPS);
            let shifted = g.add(m, eps)?;
            g.sqrt(shifted)
        } else {
            Ok(m)
        }
    }
}

/// Median of all pairwise Euclidean distances in `X ∪ Y`, falling back to
/// 1.0 when the median is zero.
pub fn median_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.cols() != y.cols() && !x.is_empty() && !y.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "median_bandwidth",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let d = if x.is_empty() { y.cols() } else { x.cols() };
    median_bandwidth_raw(x.data(), y.data(), d)
}

fn median_bandwidth_raw(x: &[f64], y: &[f64], d: usize) -> Result<f64> {
    let d = d.max(1);
    let pooled: Vec<&[f64]> = x.chunks(d).chain(y.chunks(d)).collect();
    let n = pooled.len();
    if n < 2 {
        return Err(precondition(format!(
            "median_bandwidth needs at least 2 pooled rows, got {n}"
        )));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = pooled[i]
                .iter()
                .zip(pooled[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(s.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let med = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    Ok(if med > 0.0 { med } else { 1.0 })
}

#[derive(Debug)]
struct Mmd2Op {
    n: usize,
    m: usize,
    d: usize,
    bandwidths: Vec<f64>,
    swapped: bool,
}

/// Sum over bandwidths of `Σ_ij k(a_i, b_j)` and, if requested, the gradient
/// of that sum with respect to `a` (scaled by `coef`).
fn kernel_block(
    a: &[f64],
    b: &[f64],
    na: usize,
    nb: usize,
    d: usize,
    bws: &[f64],
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let inv: Vec<f64> = bws.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
    let mut total = 0.0;
    let mut grad = grad;
    for i in 0..na {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..nb {
            let bj = &b[j * d..(j + 1) * d];
            let dist: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            let mut kv = 0.0;
            let mut dk = 0.0;
            for &c in &inv {
                let e = (-dist * c).exp();
                kv += e;
                dk += e * 2.0 * c;
            }
            total += kv;
            if let Some((ref mut ga, coef)) = grad {
                let w = -coef * dk;
                if w != 0.0 {
                    for k in 0..d {
                        ga[i * d + k] += w * (ai[k] - bj[k]);
                    }
                }
            }
        }
    }
    total
}

impl Mmd2Op {
    fn forward(&self, x: &[f64], y: &[f64]) -> f64 {
        let (n, m, d) = (self.n, self.m, self.d);
        let bws = &self.bandwidths;
        let kxx = kernel_block(x, x, n, n, d, bws, None);
        let kyy = kernel_block(y, y, m, m, d, bws, None);
        let kxy = kernel_block(x, y, n, m, d, bws, None);
        let nn = (n * n) as f64;
        let mm = (m * m) as f64;
        let nm = (n * m) as f64;
        (kxx / nn + kyy / mm - 2.0 * (kxy / nm)).max(0.0)
    }

    fn grads(&self, x: &[f64], y: &[f64], go: f64) -> (Vec<f64>, Vec<f64>) {
        let (n, m, d) = (self.n, self.m, self.d);
        let bws = &self.bandwidths;
        let (nn, mm, nm) = ((n * n) as f64, (m * m) as f64, (n * m) as f64);
        let mut gx = vec![0.0; n * d];
        let mut gy = vec![0.0; m * d];
        // Within-set sums appear twice per unordered pair, hence the factor 2.
        kernel_block(x, x, n, n, d, bws, Some((&mut gx, go * 2.0 / nn)));
        kernel_block(x, y, n, m, d, bws, Some((&mut gx, -go * 2.0 / nm)));
        kernel_block(y, y, m, m, d, bws, Some((&mut gy, go * 2.0 / mm)));
        kernel_block(y, x, m, n, d, bws, Some((&mut gy, -go * 2.0 / nm)));
        (gx, gy)
    }
}

impl CustomOp for Mmd2Op {
    fn name(&self) -> &'static str {
        "mmd2"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (x, y) = if self.swapped { (b, a) } else { (a, b) };
        let (gx, gy) = self.grads(x, y, grad_out[0]);
        if self.swapped {
            vec![gy, gx]
        } else {
            vec![gx, gy]
        }
    }
}

/// Canonical operand order so that `mmd2(X, Y)` and `mmd2(Y, X)` run the
/// identical floating-point sequence.
fn should_swap(x: &[f64], y: &[f64]) -> bool {
    if x.len() != y.len() {
        return x.len() > y.len();
    }
    for (a, b) in x.iter().zip(y) {
        match a.total_cmp(b) {
            std::cmp::Ordering::Less => return false,
            std::cmp::Ordering::Greater => return true,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

/// Biased squared MMD between row sets `x` and `y` under the multi-scale
/// Gaussian kernel `Σ_s exp(−‖a−b‖² / 2σ_s²)`; differentiable in both sets.
pub fn mmd2(g: &mut Graph, x: Var, y: Var, k: &KernelSpec) -> Result<Var> {
    let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
        return Err(Error::ShapeMismatch {
            op: "mmd2",
            left: sx,
            right: sy,
        });
    }
    if sx[0] == 0 || sy[0] == 0 {
        return Err(precondition("mmd2: empty sample set"));
    }
    let swapped = should_swap(g.value(x), g.value(y));
    let (n, m) = if swapped { (sy[0], sx[0]) } else { (sx[0], sy[0]) };
    let op = Mmd2Op {
        n,
        m,
        d: sx[1],
        bandwidths: k.bandwidths(),
        swapped,
    };
    let v = if swapped {
        op.forward(g.value(y), g.value(x))
    } else {
        op.forward(g.value(x), g.value(y))
    };
    g.custom(Box::new(op), vec![x, y], vec![], vec![v])
}

/// One domain's embeddings grouped by expression class.
#[derive(Debug, Clone, Default)]
pub struct ClassBlocks {
    blocks: BTreeMap<usize, Var>,
}

impl ClassBlocks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: usize, embeddings: Var) {
        self.blocks.insert(class, embeddings);
    }

    pub fn get(&self, class: usize) -> Option<Var> {
        self.blocks.get(&class).copied()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

impl FromIterator<(usize, Var)> for ClassBlocks {
    fn from_iter<I: IntoIterator<Item = (usize, Var)>>(iter: I) -> Self {
        Self {
            blocks: iter.into_iter().collect(),
        }
    }
}

fn mean_of(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it.next().expect("caller checks non-empty");
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / n as f64))
}

/// Average same-class discrepancy between every source and the target over
/// the confident classes (the classes present in `target`). Source/class
/// pairs with no source samples are skipped and excluded from the average.
pub fn intra_class_disc(
    g: &mut Graph,
    sources: &[ClassBlocks],
    target: &ClassBlocks,
    cfg: &MmdConfig,
) -> Result<Var> {
    let mut terms = Vec::new();
    for src in sources {
        for c in target.classes() {
            if let (Some(s), Some(t)) = (src.get(c), target.get(c)) {
                terms.push(cfg.discrepancy(g, s, t)?);
            }
        }
    }
    if terms.is_empty() {
        log::warn!("intra-class discrepancy: no evaluable (source, class) pair");
        return Ok(g.scalar(0.0));
    }
    mean_of(g, terms)
}

/// Average discrepancy between source class `c` and target class `ć ≠ c`
/// over all sources and ordered pairs of confident classes.
pub fn inter_class_disc(
    g: &mut Graph,
    sources: &[ClassBlocks],
    target: &ClassBlocks,
    cfg: &MmdConfig,
) -> Result<Var> {
    let classes: Vec<usize> = target.classes().collect();
    if classes.len() < 2 {
        log::warn!("inter-class discrepancy: fewer than 2 confident classes");
        return Ok(g.scalar(0.0));
    }
    let mut terms = Vec::new();
    for src in sources {
        for &c in &classes {
            let Some(s) = src.get(c) else { continue };
            for &other in &classes {
                if other == c {
                    continue;
                }
                let t = target.get(other).expect("listed class");
                terms.push(cfg.discrepancy(g, s, t)?);
            }
        }
    }
    if terms.is_empty() {
        log::warn!("inter-class discrepancy: no evaluable (source, class) pair");
        return Ok(g.scalar(0.0));
    }
    mean_of(g, terms)
}

/// Average discrepancy between each source's non-confident-class samples and
/// the target's non-confident samples. Sources without such samples are
/// skipped; an empty target set makes the term inactive (zero).
pub fn agnostic_disc(
    g: &mut Graph,
    sources: &[Option<Var>],
    target_u: Option<Var>,
    cfg: &MmdConfig,
) -> Result<Var> {
    let Some(t) = target_u.filter(|t| g.shape(*t).first().copied().unwrap_or(0) > 0) else {
        return Ok(g.scalar(0.0));
    };
    let mut terms = Vec::new();
    for s in sources.iter().flatten() {
        if g.shape(*s).first().copied().unwrap_or(0) == 0 {
            continue;
        }
        terms.push(cfg.discrepancy(g, *s, t)?);
    }
    if terms.is_empty() {
        return Ok(g.scalar(0.0));
    }
    mean_of(g, terms)
}

/// `Σ_m [intra_m − inter_m]`. Not clamped: driving it negative is how the
/// inter-class term gets maximised.
pub fn class_aware_loss(g: &mut Graph, per_modality: &[(Var, Var)]) -> Result<Var> {
    let mut acc = g.scalar(0.0);
    for &(intra, inter) in per_modality {
        let d = g.sub(intra, inter)?;
        acc = g.add(acc, d)?;
    }
    Ok(acc)
}

/// `Σ_m agnostic_m`.
pub fn class_agnostic_loss(g: &mut Graph, per_modality: &[Var]) -> Result<Var> {
    let mut acc = g.scalar(0.0);
    for &a in per_modality {
        acc = g.add(acc, a)?;
    }
    Ok(acc)
}
