//! Versioned checkpoint container.
//!
//! Layout: magic `NLOSCKPT`, format version (u32 LE), header length (u64 LE),
//! header JSON, raw little-endian tensor data in header order, then the
//! SHA-256 of every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nlos_tensor::{Adam, AdamConfig, Array, ParamSet, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::Networks;

pub const MAGIC: &[u8; 8] = b"NLOSCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Autoencoder,
    Joint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config_hash: String,
    pub stage: Stage,
    pub epoch: usize,
    pub networks: Networks,
    /// Every generator-side network, the codebook and the frozen feature net.
    pub params: ParamSet<T>,
    pub disc: ParamSet<T>,
    pub opt_g: Option<Adam<T>>,
    pub opt_d: Option<Adam<T>>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    decoupled: bool,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    stage: Stage,
    epoch: usize,
    networks: Networks,
    dtype: String,
    opt_g: Option<AdamHeader>,
    opt_d: Option<AdamHeader>,
    metrics: BTreeMap<String, f64>,
    tensors: Vec<TensorEntry>,
}

fn dtype<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

fn adam_header<T: Scalar>(a: &Adam<T>) -> AdamHeader {
    AdamHeader {
        beta1: a.config.beta1,
        beta2: a.config.beta2,
        eps: a.config.eps,
        weight_decay: a.config.weight_decay,
        decoupled: a.config.decoupled,
        step: a.step,
    }
}

impl<T: Scalar> Checkpoint<T> {
    fn groups(&self) -> Vec<(String, &ParamSet<T>)> {
        let mut g = vec![("params".to_string(), &self.params), ("disc".to_string(), &self.disc)];
        for (tag, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            if let Some(a) = opt {
                g.push((format!("{tag}.m"), &a.first));
                g.push((format!("{tag}.v"), &a.second));
            }
        }
        g
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let groups = self.groups();
        let tensors = groups
            .iter()
            .flat_map(|(group, set)| {
                set.iter().map(move |(name, a)| TensorEntry {
                    group: group.clone(),
                    name: name.to_string(),
                    shape: a.shape().to_vec(),
                })
            })
            .collect();
        let header = Header {
            config_hash: self.config_hash.clone(),
            stage: self.stage,
            epoch: self.epoch,
            networks: self.networks.clone(),
            dtype: dtype::<T>().into(),
            opt_g: self.opt_g.as_ref().map(adam_header),
            opt_d: self.opt_d.as_ref().map(adam_header),
            metrics: self.metrics.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let wide = dtype::<T>() == "f64";
        for (_, set) in &groups {
            for (_, a) in set.iter() {
                for v in a.data() {
                    if wide {
                        out.extend_from_slice(&v.as_f64().to_le_bytes());
                    } else {
                        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checkpoint content hash mismatch".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&body[20..hend])?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
        };
        let mut pos = hend;
        let mut groups: BTreeMap<String, ParamSet<T>> = BTreeMap::new();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let end = pos + n * width;
            if end > body.len() {
                return Err(Error::Format("truncated checkpoint data".into()));
            }
            let data: Vec<T> = body[pos..end]
                .chunks_exact(width)
                .map(|c| {
                    T::lit(if width == 8 {
                        f64::from_le_bytes(c.try_into().expect("8 bytes"))
                    } else {
                        f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                    })
                })
                .collect();
            pos = end;
            groups
                .entry(t.group.clone())
                .or_default()
                .insert(t.name.clone(), Array::from_vec(&t.shape, data)?);
        }
        if pos != body.len() {
            return Err(Error::Format("trailing bytes after checkpoint data".into()));
        }
        let mut take = |k: &str| groups.remove(k).unwrap_or_default();
        let mut opt = |h: Option<AdamHeader>, tag: &str| {
            h.map(|h| Adam {
                config: AdamConfig {
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                    weight_decay: h.weight_decay,
                    decoupled: h.decoupled,
                },
                step: h.step,
                first: take(&format!("{tag}.m")),
                second: take(&format!("{tag}.v")),
            })
        };
        let opt_g = opt(header.opt_g, "opt_g");
        let opt_d = opt(header.opt_d, "opt_d");
        Ok(Self {
            config_hash: header.config_hash,
            stage: header.stage,
            epoch: header.epoch,
            networks: header.networks,
            params: take("params"),
            disc: take("disc"),
            opt_g,
            opt_d,
            metrics: header.metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Reject checkpoints whose architecture differs from `expected`.
    pub fn expect_networks(&self, expected: &Networks) -> Result<()> {
        if self.networks.arch != expected.arch {
            return Err(Error::Contract(format!(
                "checkpoint architecture {:?} does not match {:?}",
                self.networks.arch, expected.arch
            )));
        }
        Ok(())
    }
}

/// SHA-256 over names, shapes and exact values, in name order.
pub fn param_hash<T: Scalar>(sets: &[&ParamSet<T>]) -> String {
    let mut h = Sha256::new();
    for set in sets {
        for (name, a) in set.iter() {
            h.update(name.as_bytes());
            for d in a.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in a.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}
