//! Mixture-density entropy estimation and the identity disentanglement loss.
//!
//! A diagonal Gaussian mixture `p̂(h)` estimates the marginal entropy
//! `H(h) = −E[log p̂(h)]`. The conditional density `p̂(h | Y′)` shares the
//! marginal's base parameters and adds per-identity offsets produced by a
//! small conditioning network over the one-hot identity code, so a zeroed
//! network reproduces the marginal exactly.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::nets::{Linear, Module};
use crate::rng::Rng;
use crate::tensor::{CustomOp, Graph, Tensor, Var};

pub const MIN_LOG_SCALE: f64 = -6.0;
pub const MAX_LOG_SCALE: f64 = 4.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub n_mixture: usize,
    /// Width of the conditioning network's hidden layer.
    pub cond_hidden: usize,
    pub learning_rate: f64,
    /// Minimise `H(h) − H(h|Y′)` instead of `H(h) + H(h|Y′)`.
    pub mi_variant: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            n_mixture: 10,
            cond_hidden: 64,
            learning_rate: 0.01,
            mi_variant: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mixture == 0 || self.cond_hidden == 0 {
            return Err(precondition("estimator: n_mixture and cond_hidden must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(precondition("estimator: learning_rate must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyEstimator {
    config: EstimatorConfig,
    dim: usize,
    n_ids: usize,
    /// `[1, K]` unnormalised mixture weights.
    pub logits: Tensor,
    /// `[1, K·d]`, component-major.
    pub means: Tensor,
    /// `[1, K·d]`, clamped to `[MIN_LOG_SCALE, MAX_LOG_SCALE]` when used.
    pub log_scales: Tensor,
    pub cond_hidden: Linear,
    pub cond_logits: Linear,
    pub cond_means: Linear,
    pub cond_scales: Linear,
}

impl EntropyEstimator {
    /// Means start at small random values and scales at 1; the conditioning
    /// net's output layers start at zero.
    pub fn new(dim: usize, n_ids: usize, config: EstimatorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if dim == 0 || n_ids == 0 {
            return Err(precondition("estimator: dim and n_ids must be >= 1"));
        }
        let k = config.n_mixture;
        let means: Vec<f64> = (0..k * dim)
            .map(|_| 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        Ok(Self {
            config,
            dim,
            n_ids,
            logits: Tensor::zeros(&[1, k]).into_param(),
            means: Tensor::new(vec![1, k * dim], means)?.into_param(),
            log_scales: Tensor::zeros(&[1, k * dim]).into_param(),
            cond_hidden: Linear::new(n_ids, config.cond_hidden, rng),
            cond_logits: Linear::zeros(config.cond_hidden, k),
            cond_means: Linear::zeros(config.cond_hidden, k * dim),
            cond_scales: Linear::zeros(config.cond_hidden, k * dim),
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_ids(&self) -> usize {
        self.n_ids
    }

    pub fn n_mixture(&self) -> usize {
        self.config.n_mixture
    }

    /// Places the component means on random rows of `h` and sets every scale
    /// to half the per-dimension standard deviation of `h`.
    pub fn warm_start(&mut self, h: &Tensor, rng: &mut Rng) -> Result<()> {
        check_width(h, self.dim)?;
        let n = h.rows();
        if n == 0 {
            return Err(precondition("estimator warm start: empty batch"));
        }
        let k = self.config.n_mixture;
        let rows: Vec<usize> = if n >= k {
            sample(rng, n, k).into_vec()
        } else {
            (0..k).map(|i| i % n).collect()
        };
        let mut std = vec![0.0; self.dim];
        for j in 0..self.dim {
            let m = (0..n).map(|i| h.row(i)[j]).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (h.row(i)[j] - m).powi(2)).sum::<f64>() / n as f64;
            std[j] = v.sqrt();
        }
        let means = self.means.data_mut();
        for (c, &r) in rows.iter().enumerate() {
            means[c * self.dim..(c + 1) * self.dim].copy_from_slice(h.row(r));
        }
        let ls = self.log_scales.data_mut();
        for c in 0..k {
            for j in 0..self.dim {
                ls[c * self.dim + j] = (0.5 * std[j]).max(1e-12).ln().clamp(MIN_LOG_SCALE, MAX_LOG_SCALE);
            }
        }
        self.logits.data_mut().fill(0.0);
        Ok(())
    }

    fn base_vars(&self, g: &mut Graph, frozen: bool) -> (Var, Var, Var) {
        let p = |g: &mut Graph, t: &Tensor| if frozen { g.constant(t) } else { g.leaf(t) };
        (p(g, &self.logits), p(g, &self.means), p(g, &self.log_scales))
    }

    /// Per-row conditional parameters. The net runs once on the identity
    /// matrix and is expanded with the one-hot codes, which is exact because
    /// every code row selects a single identity.
    fn cond_vars(&self, g: &mut Graph, one_hot: &Tensor, frozen: bool) -> Result<(Var, Var, Var)> {
        let (w, mu, ls) = self.base_vars(g, frozen);
        let lin = |g: &mut Graph, l: &Linear, x: Var| -> Result<Var> {
            let (wt, b) = if frozen {
                (g.constant(&l.weight), g.constant(&l.bias))
            } else {
                (g.leaf(&l.weight), g.leaf(&l.bias))
            };
            let y = g.matmul(x, wt)?;
            g.add(y, b)
        };
        let mut eye = vec![0.0; self.n_ids * self.n_ids];
        for i in 0..self.n_ids {
            eye[i * self.n_ids + i] = 1.0;
        }
        let eye = g.constant_raw(vec![self.n_ids, self.n_ids], eye)?;
        let hid = lin(g, &self.cond_hidden, eye)?;
        let hid = g.relu(hid);
        let codes = g.constant(one_hot);
        let mut out = Vec::with_capacity(3);
        for (layer, base) in [(&self.cond_logits, w), (&self.cond_means, mu), (&self.cond_scales, ls)] {
            let per_id = lin(g, layer, hid)?;
            let per_row = g.matmul(codes, per_id)?;
            out.push(g.add(per_row, base)?);
        }
        Ok((out[0], out[1], out[2]))
    }

    fn density(&self, g: &mut Graph, h: Var, cond: Option<&Tensor>, frozen: bool) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 2 || s[1] != self.dim {
            return Err(precondition(format!(
                "log_density: input shape {s:?} does not match embed dim {}",
                self.dim
            )));
        }
        if g.value(h).iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "log_density",
                detail: "non-finite embedding".into(),
            });
        }
        let (w, mu, ls) = match cond {
            None => self.base_vars(g, frozen),
            Some(c) => {
                validate_one_hot(c, self.n_ids)?;
                if c.rows() != s[0] {
                    return Err(precondition(format!(
                        "log_density: {} identity codes for {} rows",
                        c.rows(),
                        s[0]
                    )));
                }
                self.cond_vars(g, c, frozen)?
            }
        };
        mixture_log_density(g, h, w, mu, ls, self.config.n_mixture)
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.logits, &mut self.means, &mut self.log_scales];
        for l in [
            &mut self.cond_hidden,
            &mut self.cond_logits,
            &mut self.cond_means,
            &mut self.cond_scales,
        ] {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }
}

impl Module for EntropyEstimator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("logits".to_string(), &self.logits),
            ("means".to_string(), &self.means),
            ("log_scales".to_string(), &self.log_scales),
        ];
        for (name, l) in [
            ("cond_hidden", &self.cond_hidden),
            ("cond_logits", &self.cond_logits),
            ("cond_means", &self.cond_means),
            ("cond_scales", &self.cond_scales),
        ] {
            v.push((format!("{name}.weight"), &l.weight));
            v.push((format!("{name}.bias"), &l.bias));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trainable_mut()
    }
}

fn check_width(h: &Tensor, dim: usize) -> Result<()> {
    if h.shape().len() != 2 || h.cols() != dim {
        return Err(precondition(format!(
            "estimator: input shape {:?} does not match embed dim {dim}",
            h.shape()
        )));
    }
    Ok(())
}

/// Each row must hold exactly one 1 and zeros elsewhere.
pub fn validate_one_hot(codes: &Tensor, n_ids: usize) -> Result<()> {
    if codes.shape().len() != 2 || codes.cols() != n_ids {
        return Err(precondition(format!(
            "one-hot codes have shape {:?}, expected [_, {n_ids}]",
            codes.shape()
        )));
    }
    for i in 0..codes.rows() {
        let row = codes.row(i);
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || ones + zeros != n_ids {
            return Err(precondition(format!("one-hot row {i} is malformed: {row:?}")));
        }
    }
    Ok(())
}

pub fn one_hot(ids: &[usize], n_ids: usize) -> Result<Tensor> {
    let mut d = vec![0.0; ids.len() * n_ids];
    for (i, &id) in ids.iter().enumerate() {
        if id >= n_ids {
            return Err(precondition(format!("identity {id} out of range for {n_ids} identities")));
        }
        d[i * n_ids + id] = 1.0;
    }
    Tensor::new(vec![ids.len(), n_ids], d)
}

/// Fused `log Σ_k softmax(w)_k N(h; μ_k, diag e^{2s_k})` per row. Parameter
/// inputs have either one row (shared) or one row per sample.
#[derive(Debug)]
struct MixtureLogDensity {
    n: usize,
    d: usize,
    k: usize,
    shared: bool,
}

impl MixtureLogDensity {
    /// Per-row `(log p, responsibilities, mixture weights)`.
    fn eval_row(&self, i: usize, h: &[f64], w: &[f64], mu: &[f64], ls: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let (d, k) = (self.d, self.k);
        let r = if self.shared { 0 } else { i };
        let wr = &w[r * k..(r + 1) * k];
        let mur = &mu[r * k * d..(r + 1) * k * d];
        let lsr = &ls[r * k * d..(r + 1) * k * d];
        let hi = &h[i * d..(i + 1) * d];
        let mut pi = wr.to_vec();
        crate::tensor::softmax_in_place(&mut pi);
        let lse_w = crate::tensor::log_sum_exp(wr);
        let mut a = vec![0.0; k];
        for c in 0..k {
            let mut acc = wr[c] - lse_w;
            for j in 0..d {
                let s = lsr[c * d + j].clamp(MIN_LOG_SCALE, MAX_LOG_SCALE);
                let z = (hi[j] - mur[c * d + j]) * (-s).exp();
                acc -= HALF_LOG_2PI + s + 0.5 * z * z;
            }
            a[c] = acc;
        }
        let lp = crate::tensor::log_sum_exp(&a);
        let resp: Vec<f64> = a.iter().map(|v| (v - lp).exp()).collect();
        (lp, resp, pi)
    }
}

impl CustomOp for MixtureLogDensity {
    fn name(&self) -> &'static str {
        "mixture_log_density"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
        let (h, w, mu, ls) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (d, k) = (self.d, self.k);
        let mut gh = vec![0.0; h.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gmu = vec![0.0; mu.len()];
        let mut gls = vec![0.0; ls.len()];
        for i in 0..self.n {
            let go = grad_out[i];
            if go == 0.0 {
                continue;
            }
            let (_, resp, pi) = self.eval_row(i, h, w, mu, ls);
            let r = if self.shared { 0 } else { i };
            for c in 0..k {
                gw[r * k + c] += go * (resp[c] - pi[c]);
                for j in 0..d {
                    let pidx = r * k * d + c * d + j;
                    let raw = ls[pidx];
                    let s = raw.clamp(MIN_LOG_SCALE, MAX_LOG_SCALE);
                    let inv_var = (-2.0 * s).exp();
                    let diff = h[i * d + j] - mu[pidx];
                    let rc = go * resp[c];
                    gh[i * d + j] -= rc * diff * inv_var;
                    gmu[pidx] += rc * diff * inv_var;
                    if (MIN_LOG_SCALE..=MAX_LOG_SCALE).contains(&raw) {
                        gls[pidx] += rc * (diff * diff * inv_var - 1.0);
                    }
                }
            }
        }
        vec![gh, gw, gmu, gls]
    }
}

fn mixture_log_density(g: &mut Graph, h: Var, w: Var, mu: Var, ls: Var, k: usize) -> Result<Var> {
    let (n, d) = (g.shape(h)[0], g.shape(h)[1]);
    let rows = g.shape(w)[0];
    let shared = rows == 1;
    if !(shared || rows == n) || g.value(mu).len() != rows * k * d || g.value(ls).len() != rows * k * d {
        return Err(precondition("mixture_log_density: parameter shapes disagree"));
    }
    let op = MixtureLogDensity { n, d, k, shared };
    let value: Vec<f64> = (0..n)
        .map(|i| op.eval_row(i, g.value(h), g.value(w), g.value(mu), g.value(ls)).0)
        .collect();
    g.custom(Box::new(op), vec![h, w, mu, ls], vec![n], value)
}

/// Per-row `log p̂(h)`, or `log p̂(h | Y′)` when identity codes are given.
/// Estimator parameters enter as tracked leaves.
pub fn log_density(est: &EntropyEstimator, g: &mut Graph, h: Var, cond: Option<&Tensor>) -> Result<Var> {
    est.density(g, h, cond, false)
}

fn entropy(est: &EntropyEstimator, g: &mut Graph, h: Var, cond: Option<&Tensor>, frozen: bool) -> Result<Var> {
    let n = g.shape(h).first().copied().unwrap_or(0);
    if n < 2 {
        return Err(precondition(format!("entropy estimate needs a batch of >= 2, got {n}")));
    }
    let lp = est.density(g, h, cond, frozen)?;
    let m = g.mean(lp)?;
    Ok(g.neg(m))
}

/// `H(h) = −mean log p̂(h)`; differentiable in `h` and the estimator.
pub fn marginal_entropy(est: &EntropyEstimator, g: &mut Graph, h: Var) -> Result<Var> {
    entropy(est, g, h, None, false)
}

/// `H(h | Y′) = −mean log p̂(h | Y′)`.
pub fn conditional_entropy(est: &EntropyEstimator, g: &mut Graph, h: Var, one_hot: &Tensor) -> Result<Var> {
    entropy(est, g, h, Some(one_hot), false)
}

/// One full-batch gradient-descent step on the marginal plus conditional
/// negative log-likelihood of detached embeddings. Returns the NLL after the
/// step.
pub fn estimator_fit_step(est: &mut EntropyEstimator, h: &Tensor, one_hot: &Tensor) -> Result<f64> {
    check_width(h, est.dim)?;
    let nll = |est: &EntropyEstimator, g: &mut Graph| -> Result<Var> {
        let hv = g.constant(h);
        let m = marginal_entropy(est, g, hv)?;
        let c = conditional_entropy(est, g, hv, one_hot)?;
        g.add(m, c)
    };
    let mut g = Graph::new();
    let loss = nll(est, &mut g)?;
    g.backward(loss)?;
    let lr = est.config.learning_rate;
    let grads: Vec<Vec<f64>> = est
        .named_params()
        .iter()
        .map(|(_, t)| g.param_grad(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    for (p, gr) in est.trainable_mut().into_iter().zip(grads) {
        for (v, d) in p.data_mut().iter_mut().zip(gr) {
            *v -= lr * d;
        }
    }
    let mut g = Graph::new();
    let after = nll(est, &mut g)?;
    Ok(g.item(after))
}

/// Disentanglement loss with the estimator frozen, so gradients reach only
/// `h`: `H(h) + H(h|Y′)`, or `H(h) − H(h|Y′)` under the MI variant.
pub fn disentangle_loss(est: &EntropyEstimator, g: &mut Graph, h: Var, one_hot: &Tensor) -> Result<Var> {
    let m = entropy(est, g, h, None, true)?;
    let c = entropy(est, g, h, Some(one_hot), true)?;
    if est.config.mi_variant {
        g.sub(m, c)
    } else {
        g.add(m, c)
    }
}
