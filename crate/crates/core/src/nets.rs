//! Per-modality encoders and the classification heads built on their
//! embeddings. Every network here is a two-layer perceptron over feature
//! vectors; they differ only in widths and in how their outputs are used.

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Sgd, SgdConfig, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Physio,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Physio];

    pub fn short(self) -> &'static str {
        match self {
            Modality::Visual => "v",
            Modality::Physio => "p",
        }
    }
}

/// Anything holding trainable tensors. Order of `params_mut` is stable and is
/// what optimizer state is keyed on.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init in ±1/√fan_in.
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w: Vec<f64> = (0..input * output).map(|_| dist.sample(rng)).collect();
        let b: Vec<f64> = (0..output).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Tensor::new(vec![input, output], w).unwrap().into_param(),
            bias: Tensor::new(vec![1, output], b).unwrap().into_param(),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]).into_param(),
            bias: Tensor::zeros(&[1, output]).into_param(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.leaf(&self.weight);
        let b = g.leaf(&self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// `input → hidden → output` with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(input, hidden, rng),
            out: Linear::new(hidden, output, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Linear::zeros(input, hidden),
            out: Linear::zeros(hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.out.output_dim()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, what: &str) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(precondition(format!(
                "{what}: input width {:?} does not match expected {}",
                s,
                self.input_dim()
            )));
        }
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

impl Module for Mlp {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("hidden.weight".into(), &self.hidden.weight),
            ("hidden.bias".into(), &self.hidden.bias),
            ("out.weight".into(), &self.out.weight),
            ("out.bias".into(), &self.out.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }
}

macro_rules! mlp_wrapper {
    ($name:ident) => {
        impl Module for $name {
            fn named_params(&self) -> Vec<(String, &Tensor)> {
                self.net.named_params()
            }
            fn params_mut(&mut self) -> Vec<&mut Tensor> {
                self.net.params_mut()
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub modality: Modality,
    pub net: Mlp,
}

impl Backbone {
    pub fn new(modality: Modality, input: usize, hidden: usize, embed: usize, rng: &mut Rng) -> Self {
        Self {
            modality,
            net: Mlp::new(input, hidden, embed, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }
}
mlp_wrapper!(Backbone);

/// Per-row embeddings for a batch of feature vectors.
pub fn embed(backbone: &Backbone, g: &mut Graph, x: Var) -> Result<Var> {
    backbone.net.forward(g, x, "embed")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionHead {
    pub net: Mlp,
}
mlp_wrapper!(ExpressionHead);

impl ExpressionHead {
    pub fn new(embed: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            net: Mlp::new(embed, hidden, classes, rng),
        }
    }
}

/// Identity classifier. It only ever sees detached embeddings, so it measures
/// how much identity information the backbone leaves in place without
/// shaping the backbone itself.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityHead {
    pub net: Mlp,
}
mlp_wrapper!(IdentityHead);

impl IdentityHead {
    pub fn new(embed: usize, hidden: usize, identities: usize, rng: &mut Rng) -> Self {
        Self {
            net: Mlp::new(embed, hidden, identities, rng),
        }
    }

    /// Identity logits on a detached copy of `h`.
    pub fn forward_detached(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let d = g.detach(h);
        self.net.forward(g, d, "identity head")
    }
}

/// Classifier over the concatenation of the two modality embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub net: Mlp,
}
mlp_wrapper!(FusionHead);

impl FusionHead {
    pub fn new(embed: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            net: Mlp::new(2 * embed, hidden, classes, rng),
        }
    }
}

pub trait Classifier {
    fn classify(&self, g: &mut Graph, h: Var) -> Result<Var>;
    fn n_classes(&self) -> usize;
}

impl Classifier for ExpressionHead {
    fn classify(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.net.forward(g, h, "expression head")
    }
    fn n_classes(&self) -> usize {
        self.net.output_dim()
    }
}

impl Classifier for FusionHead {
    fn classify(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.net.forward(g, h, "fusion head")
    }
    fn n_classes(&self) -> usize {
        self.net.output_dim()
    }
}

pub fn classify(head: &impl Classifier, g: &mut Graph, h: Var) -> Result<Var> {
    head.classify(g, h)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: s,
            right: vec![labels.len()],
        });
    }
    let (n, c) = (s[0], s[1]);
    if n == 0 {
        return Err(precondition("cross_entropy on empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(precondition(format!("cross_entropy: label {bad} outside [0, {c})")));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let mask = g.constant_raw(vec![n, c], onehot)?;
    let lp = g.log_softmax(logits);
    let picked = g.mul(lp, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Row-wise concatenation `h_v ⊕ h_p`.
pub fn fuse(g: &mut Graph, h_v: Var, h_p: Var) -> Result<Var> {
    let (a, b) = (g.shape(h_v).to_vec(), g.shape(h_p).to_vec());
    let rows = |s: &[usize]| if s.len() < 2 { 1 } else { s[0] };
    if rows(&a) != rows(&b) {
        return Err(precondition(format!("fuse: row counts differ ({a:?} vs {b:?})")));
    }
    g.concat(h_v, h_p)
}

/// Index of the largest entry of each row.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

/// Settings for fitting an identity probe on frozen embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 400,
            batch: 64,
            lr: 0.05,
        }
    }
}

/// Per-column mean and standard deviation, used to put probe inputs on a
/// common scale so that probe accuracy does not depend on embedding norm.
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, c) = (x.rows(), x.cols());
        let mut mean = vec![0.0; c];
        for i in 0..n {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2) / n as f64;
            }
        }
        let std = var.iter().map(|v| v.sqrt().max(1e-8)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        Tensor::new(vec![x.rows(), c], out).expect("same shape")
    }
}

/// Trains a fresh identity head on detached embeddings.
pub fn train_identity_probe(
    h: &Tensor,
    ids: &[usize],
    n_ids: usize,
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<IdentityHead> {
    if h.rows() != ids.len() || ids.is_empty() {
        return Err(precondition("train_identity_probe: embeddings and ids disagree"));
    }
    let mut head = IdentityHead::new(h.cols(), cfg.hidden, n_ids, rng);
    let mut opt = Sgd::new(SgdConfig {
        learning_rate: cfg.lr,
        momentum: 0.9,
        weight_decay: 0.0,
        eta_min: 0.0,
    })?;
    let n = ids.len();
    let batch = cfg.batch.min(n).max(1);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let xb = h.select_rows(&idx);
        let yb: Vec<usize> = idx.iter().map(|&i| ids[i]).collect();
        let mut g = Graph::new();
        let x = g.constant(&xb);
        let logits = head.forward_detached(&mut g, x)?;
        let loss = cross_entropy(&mut g, logits, &yb)?;
        g.backward(loss)?;
        g.write_grads(head.params_mut())?;
        opt.step(&mut head.params_mut())?;
    }
    Ok(head)
}

/// Top-1 identity accuracy of `head` on embeddings `h`.
pub fn identity_probe_accuracy(head: &IdentityHead, h: &Tensor, ids: &[usize]) -> Result<f64> {
    if h.rows() != ids.len() {
        return Err(precondition("identity_probe_accuracy: embeddings and ids disagree"));
    }
    if ids.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let x = g.constant(h);
    let logits = head.forward_detached(&mut g, x)?;
    let pred = argmax_rows(g.value(logits), head.net.output_dim());
    Ok(accuracy(&pred, ids))
}

/// Fits a standardized probe on `(train_h, train_ids)` and scores it on the
/// held-out pair.
pub fn probe_identity(
    train_h: &Tensor,
    train_ids: &[usize],
    test_h: &Tensor,
    test_ids: &[usize],
    n_ids: usize,
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let st = Standardizer::fit(train_h);
    let head = train_identity_probe(&st.apply(train_h), train_ids, n_ids, cfg, rng)?;
    identity_probe_accuracy(&head, &st.apply(test_h), test_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::finite_diff_check;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        let d = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(vec![rows, cols], d).unwrap()
    }

    fn bits_hash(vals: &[f64]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in vals {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    #[test]
    fn zero_backbone_gives_zero_embeddings() {
        let bb = Backbone {
            modality: Modality::Visual,
            net: Mlp::zeros(5, 8, 3),
        };
        let mut rng = stream(1, "x");
        let mut g = Graph::new();
        let x = g.constant(&randn(4, 5, &mut rng));
        let h = embed(&bb, &mut g, x).unwrap();
        assert!(g.value(h).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embedding_is_batch_independent() {
        let mut rng = stream(2, "x");
        let bb = Backbone::new(Modality::Physio, 5, 8, 3, &mut rng);
        let x2 = randn(2, 5, &mut rng);
        let x1 = x2.select_rows(&[0]);
        let mut g = Graph::new();
        let (a, b) = (g.constant(&x1), g.constant(&x2));
        let h1 = embed(&bb, &mut g, a).unwrap();
        let h2 = embed(&bb, &mut g, b).unwrap();
        assert_eq!(g.value(h1), &g.value(h2)[..3]);
    }

    #[test]
    fn embed_rejects_wrong_width() {
        let mut rng = stream(3, "x");
        let bb = Backbone::new(Modality::Visual, 5, 8, 3, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[2, 4]));
        assert!(matches!(embed(&bb, &mut g, x), Err(Error::Precondition(_))));
    }

    #[test]
    fn golden_forward_hashes() {
        let mut rng = stream(42, "golden");
        let bb = Backbone::new(Modality::Visual, 6, 16, 4, &mut rng);
        let head = ExpressionHead::new(4, 8, 3, &mut rng);
        let x = randn(5, 6, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let h = embed(&bb, &mut g, xv).unwrap();
        let logits = classify(&head, &mut g, h).unwrap();
        assert_eq!(bits_hash(g.value(h)), GOLDEN_EMBED);
        assert_eq!(bits_hash(g.value(logits)), GOLDEN_LOGITS);
    }

    const GOLDEN_EMBED: u64 = 4481989355589577769;
    const GOLDEN_LOGITS: u64 = 7073295426569954615;

    #[test]
    fn zero_head_is_uniform() {
        let head = ExpressionHead {
            net: Mlp::zeros(4, 8, 5),
        };
        let mut g = Graph::new();
        let h = g.constant(&Tensor::new(vec![2, 4], vec![1.0; 8]).unwrap());
        let logits = classify(&head, &mut g, h).unwrap();
        let p = g.softmax(logits);
        assert!(g.value(p).iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn classify_is_permutation_equivariant() {
        let mut rng = stream(4, "x");
        let head = FusionHead::new(3, 8, 4, &mut rng);
        let h = randn(4, 6, &mut rng);
        let perm = [2, 0, 3, 1];
        let mut g = Graph::new();
        let a = g.constant(&h);
        let b = g.constant(&h.select_rows(&perm));
        let la = classify(&head, &mut g, a).unwrap();
        let lb = classify(&head, &mut g, b).unwrap();
        let la = g.to_tensor(la);
        let lb = g.to_tensor(lb);
        for (r, &p) in perm.iter().enumerate() {
            assert_eq!(lb.row(r), la.row(p));
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::new();
        let l = g.constant(&Tensor::zeros(&[3, 5]));
        let ce = cross_entropy(&mut g, l, &[0, 3, 4]).unwrap();
        assert_relative_eq!(g.item(ce), 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut g = Graph::new();
        let l = g.constant(&Tensor::new(vec![1, 3], vec![0.0, 200.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut g, l, &[1]).unwrap();
        assert!(g.item(ce) < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_per_row_formula() {
        let mut rng = stream(5, "x");
        let logits = randn(3, 4, &mut rng);
        let labels = [2, 0, 3];
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[y].exp() / z).ln();
        }
        expect /= 3.0;
        let mut g = Graph::new();
        let l = g.constant(&logits);
        let ce = cross_entropy(&mut g, l, &labels).unwrap();
        assert_relative_eq!(g.item(ce), expect, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let l = g.constant(&Tensor::zeros(&[1, 3]));
        assert!(cross_entropy(&mut g, l, &[3]).is_err());
    }

    #[test]
    fn softmax_ce_weight_gradient_matches_finite_difference() {
        let mut rng = stream(6, "x");
        let x = randn(6, 4, &mut rng);
        let w = randn(4, 3, &mut rng);
        let labels = [0, 1, 2, 2, 1, 0];
        let err = finite_diff_check(
            |g, wv| {
                let xv = g.constant(&x);
                let logits = g.matmul(xv, wv)?;
                cross_entropy(g, logits, &labels)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn fuse_concatenates() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(&Tensor::vector(vec![3.0]));
        let f = fuse(&mut g, a, b).unwrap();
        assert_eq!(g.value(f), &[1.0, 2.0, 3.0]);
        let z = g.constant(&Tensor::zeros(&[2, 2]));
        let f0 = fuse(&mut g, z, z).unwrap();
        assert!(g.value(f0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fuse_rejects_row_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 2]));
        let b = g.constant(&Tensor::zeros(&[3, 2]));
        assert!(fuse(&mut g, a, b).is_err());
    }

    #[test]
    fn fuse_gradient_reaches_both_inputs() {
        let mut rng = stream(7, "x");
        let hv = randn(3, 2, &mut rng);
        let hp = randn(3, 3, &mut rng);
        let w = randn(5, 2, &mut rng);
        let labels = [0, 1, 1];
        let loss = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
            let f = fuse(g, a, b)?;
            let wv = g.constant(&w);
            let l = g.matmul(f, wv)?;
            cross_entropy(g, l, &labels)
        };
        let err_v = finite_diff_check(
            |g, a| {
                let b = g.constant(&hp);
                loss(g, a, b)
            },
            &hv,
            1e-5,
        )
        .unwrap();
        let err_p = finite_diff_check(
            |g, b| {
                let a = g.constant(&hv);
                loss(g, a, b)
            },
            &hp,
            1e-5,
        )
        .unwrap();
        assert!(err_v < 1e-5 && err_p < 1e-5, "{err_v} {err_p}");
    }

    #[test]
    fn identity_head_never_touches_backbone() {
        let mut rng = stream(8, "x");
        let mut bb = Backbone::new(Modality::Visual, 4, 8, 3, &mut rng);
        let mut id = IdentityHead::new(3, 8, 2, &mut rng);
        let before = bb.clone();
        let x = randn(6, 4, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let h = embed(&bb, &mut g, xv).unwrap();
        let logits = id.forward_detached(&mut g, h).unwrap();
        let loss = cross_entropy(&mut g, logits, &[0, 1, 0, 1, 0, 1]).unwrap();
        g.backward(loss).unwrap();
        assert!(bb.named_params().iter().all(|(_, t)| g.param_grad(t).is_none()));
        g.write_grads(id.params_mut()).unwrap();
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        opt.step(&mut id.params_mut()).unwrap();
        g.write_grads(bb.params_mut()).unwrap();
        assert!(bb.named_params().iter().all(|(_, t)| t.grad().unwrap().iter().all(|v| *v == 0.0)));
        for p in bb.params_mut() {
            p.clear_grad();
        }
        assert_eq!(bb, before);
    }

    #[test]
    fn probe_single_identity_is_perfect() {
        let mut rng = stream(9, "x");
        let h = randn(20, 4, &mut rng);
        let ids = vec![0; 20];
        let cfg = ProbeConfig { steps: 50, ..Default::default() };
        let head = train_identity_probe(&h, &ids, 1, &cfg, &mut rng).unwrap();
        assert_eq!(identity_probe_accuracy(&head, &h, &ids).unwrap(), 1.0);
    }

    #[test]
    fn probe_on_one_hot_codes_is_near_perfect() {
        let mut rng = stream(10, "x");
        let k = 5;
        let n = 100;
        let ids: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut d = vec![0.0; n * k];
        for (i, &y) in ids.iter().enumerate() {
            d[i * k + y] = 1.0;
        }
        let h = Tensor::new(vec![n, k], d).unwrap();
        let acc = probe_identity(&h, &ids, &h, &ids, k, &ProbeConfig::default(), &mut rng).unwrap();
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn probe_on_random_embeddings_is_chance() {
        let k = 4;
        let mut accs = Vec::new();
        for seed in 0..5 {
            let mut rng = stream(seed, "chance");
            let tr = randn(200, 6, &mut rng);
            let te = randn(200, 6, &mut rng);
            let ids_tr: Vec<usize> = (0..200).map(|i| i % k).collect();
            let ids_te = ids_tr.clone();
            accs.push(probe_identity(&tr, &ids_tr, &te, &ids_te, k, &ProbeConfig::default(), &mut rng).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.25).abs() <= 0.1, "{accs:?}");
    }
}
