//! The trained artifact: per-modality branches plus the fusion head, with a
//! JSON checkpoint format that round-trips every parameter bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::disentangle::{EntropyEstimator, EstimatorConfig};
use crate::error::{io_err, precondition, Error, Result};
use crate::nets::{
    argmax_rows, embed, Backbone, Classifier, ExpressionHead, FusionHead, IdentityHead, Modality, Module,
};
use crate::rng::{stream, Rng};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub dim_visual: usize,
    pub dim_physio: usize,
    pub hidden: usize,
    pub embed: usize,
    pub head_hidden: usize,
    pub n_classes: usize,
    /// Number of source identities the identity heads and estimators see.
    pub n_ids: usize,
}

impl ModelDims {
    pub fn input(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.dim_visual,
            Modality::Physio => self.dim_physio,
        }
    }
}

/// Everything attached to one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub backbone: Backbone,
    pub expr: ExpressionHead,
    pub identity: IdentityHead,
    pub estimator: EntropyEstimator,
}

impl Branch {
    fn new(m: Modality, dims: &ModelDims, est: EstimatorConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::new(m, dims.input(m), dims.hidden, dims.embed, rng),
            expr: ExpressionHead::new(dims.embed, dims.head_hidden, dims.n_classes, rng),
            identity: IdentityHead::new(dims.embed, dims.head_hidden, dims.n_ids, rng),
            estimator: EntropyEstimator::new(dims.embed, dims.n_ids, est, rng)?,
        })
    }

    /// Parameters updated by the main optimizer: backbone then expression head.
    pub fn trunk_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.params_mut();
        v.extend(self.expr.params_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub dims: ModelDims,
    pub visual: Branch,
    pub physio: Branch,
    pub fusion: FusionHead,
}

impl ModelBundle {
    pub fn new(dims: ModelDims, est: EstimatorConfig, rng: &mut Rng) -> Result<Self> {
        if dims.embed == 0 || dims.hidden == 0 || dims.head_hidden == 0 || dims.n_classes < 2 || dims.n_ids == 0 {
            return Err(precondition(format!("invalid model dims {dims:?}")));
        }
        Ok(Self {
            dims,
            visual: Branch::new(Modality::Visual, &dims, est, rng)?,
            physio: Branch::new(Modality::Physio, &dims, est, rng)?,
            fusion: FusionHead::new(dims.embed, dims.head_hidden, dims.n_classes, rng),
        })
    }

    pub fn branch(&self, m: Modality) -> &Branch {
        match m {
            Modality::Visual => &self.visual,
            Modality::Physio => &self.physio,
        }
    }

    pub fn branch_mut(&mut self, m: Modality) -> &mut Branch {
        match m {
            Modality::Visual => &mut self.visual,
            Modality::Physio => &mut self.physio,
        }
    }

    /// Embeddings of `x` without recording gradients.
    pub fn embed_values(&self, m: Modality, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let h = embed(&self.branch(m).backbone, &mut g, xv)?;
        Ok(g.to_tensor(h))
    }

    /// Row-wise class probabilities of one modality's expression head.
    pub fn modality_probs(&self, m: Modality, x: &Tensor) -> Result<Tensor> {
        let b = self.branch(m);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let h = embed(&b.backbone, &mut g, xv)?;
        let logits = b.expr.classify(&mut g, h)?;
        let p = g.softmax(logits);
        Ok(g.to_tensor(p))
    }

    pub fn fused_logits(&self, xv: &Tensor, xp: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(xv), g.constant(xp));
        let hv = embed(&self.visual.backbone, &mut g, a)?;
        let hp = embed(&self.physio.backbone, &mut g, b)?;
        let h = crate::nets::fuse(&mut g, hv, hp)?;
        let l = self.fusion.classify(&mut g, h)?;
        Ok(g.to_tensor(l))
    }

    pub fn predict_fused(&self, xv: &Tensor, xp: &Tensor) -> Result<Vec<usize>> {
        let l = self.fused_logits(xv, xp)?;
        Ok(argmax_rows(l.data(), self.dims.n_classes))
    }

    pub fn predict_modality(&self, m: Modality, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.modality_probs(m, x)?;
        Ok(argmax_rows(p.data(), self.dims.n_classes))
    }

    /// FNV-1a over the bit patterns of every parameter, in name order.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.named_params() {
            for b in name.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn prefixed<'a>(prefix: &str, v: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    v.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

impl Module for ModelBundle {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for m in Modality::ALL {
            let b = self.branch(m);
            let p = m.short();
            out.extend(prefixed(&format!("{p}.backbone"), b.backbone.named_params()));
            out.extend(prefixed(&format!("{p}.expr"), b.expr.named_params()));
            out.extend(prefixed(&format!("{p}.identity"), b.identity.named_params()));
            out.extend(prefixed(&format!("{p}.estimator"), b.estimator.named_params()));
        }
        out.extend(prefixed("fusion", self.fusion.named_params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let ModelBundle {
            visual, physio, fusion, ..
        } = self;
        for b in [visual, physio] {
            out.extend(b.backbone.params_mut());
            out.extend(b.expr.params_mut());
            out.extend(b.identity.params_mut());
            out.extend(b.estimator.params_mut());
        }
        out.extend(fusion.params_mut());
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    dims: ModelDims,
    estimator: EstimatorConfig,
    params: BTreeMap<String, StoredTensor>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        dims: bundle.dims,
        estimator: *bundle.visual.estimator.config(),
        params: bundle
            .named_params()
            .into_iter()
            .map(|(n, t)| {
                (
                    n,
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string(&ck).map_err(|e| precondition(format!("serialise checkpoint: {e}")))?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "run `train-source` first".into(),
        });
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parse = |detail: String| Error::Parse {
        path: path.to_path_buf(),
        line: None,
        field: None,
        detail,
    };
    let mut ck: Checkpoint = serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
    let mut bundle = ModelBundle::new(ck.dims, ck.estimator, &mut stream(0, "checkpoint-skeleton"))?;
    let names: Vec<String> = bundle.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(bundle.params_mut()) {
        let stored = ck
            .params
            .remove(name)
            .ok_or_else(|| parse(format!("missing parameter `{name}`")))?;
        if stored.shape != slot.shape() {
            return Err(parse(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                stored.shape,
                slot.shape()
            )));
        }
        let mut t = Tensor::new(stored.shape, stored.data).map_err(|e| parse(format!("`{name}`: {e}")))?;
        t.set_requires_grad(true);
        *slot = t;
    }
    if let Some(extra) = ck.params.keys().next() {
        return Err(parse(format!("unexpected parameter `{extra}`")));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dims() -> ModelDims {
        ModelDims {
            dim_visual: 5,
            dim_physio: 3,
            hidden: 8,
            embed: 4,
            head_hidden: 6,
            n_classes: 3,
            n_ids: 4,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = stream(1, "m");
        let mut b = ModelBundle::new(dims(), EstimatorConfig::default(), &mut rng).unwrap();
        // awkward values
        b.fusion.net.out.bias.data_mut()[0] = 0.1 + 0.2;
        b.visual.expr.net.hidden.weight.data_mut()[1] = -1.0e-310;
        b.physio.backbone.net.out.weight.data_mut()[2] = std::f64::consts::PI * 1e17;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&b, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.param_hash(), b.param_hash());
    }

    #[test]
    fn missing_checkpoint_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nope.json");
        let e = load_checkpoint(&path).unwrap_err();
        assert!(e.to_string().contains("nope.json"), "{e}");
    }

    #[test]
    fn param_names_are_unique_and_cover_every_tensor() {
        let mut b = ModelBundle::new(dims(), EstimatorConfig::default(), &mut stream(2, "m")).unwrap();
        let names: Vec<String> = b.named_params().into_iter().map(|(n, _)| n).collect();
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
        assert_eq!(b.params_mut().len(), names.len());
    }

    #[test]
    fn predictions_have_one_label_per_row() {
        let b = ModelBundle::new(dims(), EstimatorConfig::default(), &mut stream(3, "m")).unwrap();
        let xv = Tensor::zeros(&[7, 5]);
        let xp = Tensor::zeros(&[7, 3]);
        assert_eq!(b.predict_fused(&xv, &xp).unwrap().len(), 7);
        let p = b.modality_probs(Modality::Physio, &xp).unwrap();
        for i in 0..7 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
