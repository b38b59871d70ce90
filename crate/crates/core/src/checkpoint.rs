//! Checkpoint documents: a versioned JSON snapshot of every network tensor
//! plus the normalization statistics and run metadata. Documents round-trip
//! exactly (load of a save reproduces the same bytes on re-save).

use std::collections::BTreeMap;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::trainer::Learner;
use crate::vaepolicy::{PolicyConfig, PolicyNets, DECODER_ORI_PREFIX};
use crate::worldmodel::{NormStats, WorldModel};

pub const FORMAT_VERSION: u32 = 1;

/// Network architecture metadata needed to rebuild the learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetsMeta {
    pub num_joints: usize,
    pub z_dim: usize,
    pub window: usize,
    pub sigma: f64,
    pub hidden: Vec<usize>,
    pub wm_hidden: Vec<usize>,
}

impl NetsMeta {
    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            num_joints: self.num_joints,
            z_dim: self.z_dim,
            window: self.window,
            sigma: self.sigma,
            hidden: self.hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub phase: String,
    pub iteration: usize,
    pub seed: u64,
    pub norm_fitted: bool,
    pub nets: NetsMeta,
    pub normalization: NormStats,
    pub tensors: BTreeMap<String, TensorDoc>,
}

impl Checkpoint {
    pub fn from_learner(learner: &Learner, phase: &str, iteration: usize, seed: u64) -> Self {
        let cfg = &learner.nets.cfg;
        let wm_sizes = &learner.wm.spec.sizes;
        let wm_hidden = wm_sizes[1..wm_sizes.len() - 1].to_vec();
        let mut tensors = BTreeMap::new();
        for name in learner.store.names() {
            let t = learner.store.get(name).unwrap();
            tensors.insert(
                name.to_string(),
                TensorDoc { shape: t.shape.clone(), data: t.data.clone() },
            );
        }
        Checkpoint {
            format_version: FORMAT_VERSION,
            phase: phase.to_string(),
            iteration,
            seed,
            norm_fitted: learner.norm_fitted,
            nets: NetsMeta {
                num_joints: cfg.num_joints,
                z_dim: cfg.z_dim,
                window: cfg.window,
                sigma: cfg.sigma,
                hidden: cfg.hidden.clone(),
                wm_hidden,
            },
            normalization: learner.normalization_snapshot(),
            tensors,
        }
    }

    /// Rebuild a learner, validating that every expected tensor is present
    /// with the right shape and that no unknown tensors sneak in. The
    /// original-decoder snapshot is optional but must be complete when any
    /// part of it appears.
    pub fn into_learner(&self) -> Result<Learner> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let policy_cfg = self.nets.policy_config();
        let wm = WorldModel::new(self.nets.num_joints, &self.nets.wm_hidden);
        let nets = PolicyNets::new(policy_cfg);

        let mut expected: Vec<String> = Vec::new();
        expected.extend(wm.spec.param_names());
        expected.extend(nets.prior.param_names());
        expected.extend(nets.enc_mt.param_names());
        expected.extend(nets.enc_cf.param_names());
        expected.extend(nets.decoder.param_names());
        let has_snapshot = self
            .tensors
            .keys()
            .any(|n| n.starts_with(&format!("{DECODER_ORI_PREFIX}/")));
        if has_snapshot {
            expected.extend(nets.decoder_ori.param_names());
        }

        let mut store = ParamStore::new();
        for name in &expected {
            let doc = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if doc.shape.iter().product::<usize>() != doc.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` shape {:?} does not match its {} values",
                    doc.shape,
                    doc.data.len()
                )));
            }
            let t = Tensor::new(doc.shape.clone(), doc.data.clone());
            let reference = shape_of(&wm, &nets, name)?;
            if t.shape != reference {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape, reference
                )));
            }
            store.insert(name, t);
        }
        for name in self.tensors.keys() {
            if !expected.iter().any(|e| e == name) {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }

        Ok(Learner::from_parts(wm, nets, store, self.normalization.clone(), self.norm_fitted))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// Expected shape of a named tensor given the architectures.
fn shape_of(wm: &WorldModel, nets: &PolicyNets, name: &str) -> Result<Vec<usize>> {
    for spec in [&wm.spec, &nets.prior, &nets.enc_mt, &nets.enc_cf, &nets.decoder, &nets.decoder_ori]
    {
        for l in 0..spec.num_layers() {
            if name == spec.weight_name(l) {
                return Ok(vec![spec.sizes[l + 1], spec.sizes[l]]);
            }
            if name == spec.bias_name(l) {
                return Ok(vec![spec.sizes[l + 1]]);
            }
        }
    }
    Err(Error::Checkpoint(format!("unexpected tensor `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::DEFAULT_JOINTS;

    fn learner() -> Learner {
        let cfg = PolicyConfig {
            num_joints: DEFAULT_JOINTS,
            z_dim: 4,
            window: 2,
            sigma: 0.3,
            hidden: vec![16],
        };
        Learner::new(cfg, &[16], 42)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let l = learner();
        let ck = Checkpoint::from_learner(&l, "mt-scratch", 3, 42);
        let json1 = ck.to_json().unwrap();
        let loaded = Checkpoint::from_json(&json1).unwrap();
        let json2 = loaded.to_json().unwrap();
        assert_eq!(json1, json2);

        let rebuilt = loaded.into_learner().unwrap();
        assert_eq!(rebuilt.store.len(), l.store.len());
        for name in l.store.names() {
            assert_eq!(rebuilt.store.get(name).unwrap(), l.store.get(name).unwrap());
        }
    }

    #[test]
    fn tampered_shape_is_rejected_by_name() {
        let l = learner();
        let mut ck = Checkpoint::from_learner(&l, "mt-scratch", 0, 1);
        ck.tensors.get_mut("prior/l0/w").unwrap().shape = vec![3, 3];
        let err = ck.into_learner().unwrap_err();
        assert!(err.to_string().contains("prior/l0/w"), "{err}");
    }

    #[test]
    fn missing_and_unknown_tensors_are_rejected() {
        let l = learner();
        let mut ck = Checkpoint::from_learner(&l, "mt-scratch", 0, 1);
        ck.tensors.remove("dec/l1/b");
        let err = ck.clone().into_learner().unwrap_err();
        assert!(err.to_string().contains("dec/l1/b"), "{err}");

        let l = learner();
        let mut ck = Checkpoint::from_learner(&l, "mt-scratch", 0, 1);
        ck.tensors.insert(
            "mystery/l0/w".into(),
            TensorDoc { shape: vec![1], data: vec![0.0] },
        );
        let err = ck.into_learner().unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn snapshot_round_trips_when_present() {
        let mut l = learner();
        l.nets.snapshot_decoder(&mut l.store);
        let ck = Checkpoint::from_learner(&l, "finetune", 2, 9);
        let rebuilt = ck.into_learner().unwrap();
        assert!(rebuilt.nets.has_decoder_snapshot(&rebuilt.store));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let l = learner();
        let mut ck = Checkpoint::from_learner(&l, "mt-scratch", 0, 1);
        ck.format_version = 99;
        assert!(ck.into_learner().is_err());
    }
}
