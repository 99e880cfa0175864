//! Named-tensor checkpoints bound to the graph specs that produced them.
//!
//! File layout (integers little-endian): magic `CDHK`, `u32` version,
//! `u64` header length, JSON header, then every tensor's `f32` values in
//! header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::spec::ModelGraphSpec;
use crate::nn::Network;
use crate::rng::rng_for;

const MAGIC: &[u8; 4] = b"CDHK";
const VERSION: u32 = 1;

/// Pipeline stage that wrote a checkpoint. `Pretrain` covers the
/// self-supervised baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Student,
    Fewshot,
    Pretrain,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Teacher => "teacher",
            Stage::Student => "student",
            Stage::Fewshot => "fewshot",
            Stage::Pretrain => "pretrain",
        };
        f.write_str(s)
    }
}

/// One network inside a checkpoint (e.g. `encoder`, `head`).
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub role: String,
    pub spec: ModelGraphSpec,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    pub components: Vec<Component>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ComponentMeta {
    role: String,
    spec: ModelGraphSpec,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    seed: u64,
    config_hash: String,
    graph_fingerprint: String,
    components: Vec<ComponentMeta>,
}

impl Checkpoint {
    pub fn new(stage: Stage, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            stage,
            seed,
            config_hash: config_hash.into(),
            components: Vec::new(),
        }
    }

    /// Adds (or replaces) the component `role` with a snapshot of `net`.
    pub fn with(mut self, role: &str, net: &Network) -> Self {
        self.components.retain(|c| c.role != role);
        self.components.push(Component {
            role: role.to_string(),
            spec: net.spec().clone(),
            tensors: net.state(),
        });
        self
    }

    /// Hash over the role names and spec fingerprints of all components.
    pub fn graph_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.components {
            h.update(c.role.as_bytes());
            h.update([0]);
            h.update(c.spec.fingerprint().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn component(&self, role: &str) -> Result<&Component> {
        self.components
            .iter()
            .find(|c| c.role == role)
            .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint has no `{role}` component", self.stage)))
    }

    /// Loads `role` into an existing network; the specs must match exactly.
    pub fn load_into(&self, role: &str, net: &mut Network) -> Result<()> {
        let c = self.component(role)?;
        let want = net.spec().fingerprint();
        let have = c.spec.fingerprint();
        if want != have {
            return Err(Error::Checkpoint(format!(
                "graph fingerprint mismatch for `{role}`: checkpoint {} ({}), network {} ({})",
                &have[..12],
                c.spec.name,
                &want[..12],
                net.spec().name
            )));
        }
        net.load_state(&c.tensors)
    }

    /// Builds a network from the stored spec and weights.
    pub fn instantiate(&self, role: &str) -> Result<Network> {
        let c = self.component(role)?;
        let mut net = Network::new(&c.spec, &mut rng_for(0, "checkpoint", 0))?;
        net.load_state(&c.tensors)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            stage: self.stage,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            graph_fingerprint: self.graph_fingerprint(),
            components: self
                .components
                .iter()
                .map(|c| ComponentMeta {
                    role: c.role.clone(),
                    spec: c.spec.clone(),
                    tensors: c
                        .tensors
                        .iter()
                        .map(|(n, t)| TensorMeta { name: n.clone(), shape: t.shape().to_vec() })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for c in &self.components {
            for t in c.tensors.values() {
                for v in t.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write then rename so a checkpoint is never observed half-written.
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: String| Error::Checkpoint(format!("{}: {why}", path.display()));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
        let mut data = &bytes[16 + hlen..];
        let mut components = Vec::new();
        for meta in header.components {
            meta.spec.validate()?;
            let mut tensors = BTreeMap::new();
            for t in meta.tensors {
                let n: usize = t.shape.iter().product();
                if data.len() < n * 4 {
                    return Err(bad("truncated tensor payload".into()));
                }
                let values = data[..n * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                data = &data[n * 4..];
                let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), values).map_err(|e| bad(e.to_string()))?;
                tensors.insert(t.name, arr);
            }
            components.push(Component { role: meta.role, spec: meta.spec, tensors });
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor payload".into()));
        }
        let ckpt = Self {
            stage: header.stage,
            seed: header.seed,
            config_hash: header.config_hash,
            components,
        };
        if ckpt.graph_fingerprint() != header.graph_fingerprint {
            return Err(bad("stored graph fingerprint does not match its specs".into()));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spec::{conv_encoder_spec, mlp_head_spec};

    #[test]
    fn round_trip_and_fingerprint_guard() {
        let dir = tempfile::tempdir().unwrap();
        let enc = Network::new(&conv_encoder_spec(50, 3).unwrap(), &mut rng_for(1, "e", 0)).unwrap();
        let head = Network::new(&mlp_head_spec(128, 4).unwrap(), &mut rng_for(1, "h", 0)).unwrap();
        let ck = Checkpoint::new(Stage::Teacher, 7, "abc").with("encoder", &enc).with("head", &head);
        let path = dir.path().join("teacher.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.instantiate("encoder").unwrap().digest(), enc.digest());

        let mut other = Network::new(&mlp_head_spec(128, 5).unwrap(), &mut rng_for(2, "h", 0)).unwrap();
        let err = back.load_into("head", &mut other).unwrap_err();
        assert!(err.to_string().contains("fingerprint mismatch"));
        assert!(back.component("projection").is_err());
    }
}
