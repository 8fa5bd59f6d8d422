//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SPCK" | u32 version | u64 header_len | header (JSON, header_len bytes) | payload
//! ```
//!
//! The header holds the network config, step, RNG states, optimizer
//! counters, the training-config digest and a tensor table of
//! `(name, shape, offset)`; `offset` counts f32 values into the payload.
//! Tensors are stored in table order, so writing is a pure function of the
//! checkpoint and save→load→save reproduces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamHyper};
use crate::error::{Error, Result};
use crate::netarch::{param_shapes, NetConfig, NetParams, ParamGroup};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Optimizers {
    pub segmentor: Adam,
    pub generator: Adam,
    pub discriminator: Adam,
}

impl Optimizers {
    fn named(&self) -> [(&'static str, &Adam); 3] {
        [
            ("segmentor", &self.segmentor),
            ("generator", &self.generator),
            ("discriminator", &self.discriminator),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub params: NetParams,
    pub optim: Optimizers,
    /// Completed optimization steps over both phases.
    pub step: u64,
    pub data_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    /// Digest of the training config the run was started with.
    pub train_hash: String,
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    hyper: AdamHyper,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    net: NetConfig,
    step: u64,
    train_hash: String,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    optim: BTreeMap<String, OptimHeader>,
    tensors: Vec<TensorEntry>,
}

fn group_tensors<'a>(prefix: &str, g: &'a ParamGroup) -> Vec<(String, &'a Tensor)> {
    g.iter()
        .map(|(k, v)| (format!("{prefix}/{k}"), v.as_tensor()))
        .collect()
}

fn state_tensors<'a>(prefix: &str, map: &'a BTreeMap<String, Tensor>) -> Vec<(String, &'a Tensor)> {
    map.iter()
        .map(|(k, v)| (format!("{prefix}/{k}"), v))
        .collect()
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, g) in self.params.groups() {
            out.extend(group_tensors(&format!("params/{name}"), g));
        }
        for (name, a) in self.optim.named() {
            out.extend(state_tensors(&format!("adam/{name}/m"), &a.m));
            out.extend(state_tensors(&format!("adam/{name}/v"), &a.v));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut table = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        for (name, t) in self.tensors() {
            let values = t.flatten_all()?.to_vec1::<f32>()?;
            table.push(TensorEntry {
                name,
                shape: t.dims().to_vec(),
                offset,
            });
            offset += values.len();
            payload.extend(values.iter().flat_map(|v| v.to_le_bytes()));
        }
        let header = Header {
            net: self.net.clone(),
            step: self.step,
            train_hash: self.train_hash.clone(),
            data_rng: self.data_rng.clone(),
            noise_rng: self.noise_rng.clone(),
            optim: self
                .optim
                .named()
                .into_iter()
                .map(|(n, a)| {
                    (
                        n.to_string(),
                        OptimHeader {
                            hyper: a.hyper,
                            t: a.t,
                        },
                    )
                })
                .collect(),
            tensors: table,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |msg: String| Error::Corrupt {
            path: origin.to_path_buf(),
            msg,
        };
        if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        header.net.validate().map_err(|e| corrupt(e.to_string()))?;
        let payload = &bytes[header_end..];
        if !payload.len().is_multiple_of(4) {
            return Err(corrupt(
                "payload is not a whole number of f32 values".into(),
            ));
        }

        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut expected_offset = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || (e.offset + n) * 4 > payload.len() {
                return Err(corrupt(format!(
                    "tensor {} lies outside the payload",
                    e.name
                )));
            }
            let values: Vec<f32> = payload[e.offset * 4..(e.offset + n) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(format!(
                    "tensor {} holds non-finite values",
                    e.name
                )));
            }
            expected_offset += n;
            if tensors
                .insert(
                    e.name.clone(),
                    Tensor::from_vec(values, e.shape.as_slice(), &Device::Cpu)?,
                )
                .is_some()
            {
                return Err(corrupt(format!("duplicate tensor {}", e.name)));
            }
        }
        if expected_offset * 4 != payload.len() {
            return Err(corrupt("trailing bytes after the last tensor".into()));
        }

        let mut take_prefix = |prefix: &str| -> BTreeMap<String, Tensor> {
            let p = format!("{prefix}/");
            let keys: Vec<String> = tensors
                .keys()
                .filter(|k| k.starts_with(&p))
                .cloned()
                .collect();
            keys.into_iter()
                .map(|k| {
                    let t = tensors.remove(&k).expect("key present");
                    (k[p.len()..].to_string(), t)
                })
                .collect()
        };
        let mut group = |name: &str| -> Result<ParamGroup> {
            let mut g = ParamGroup::new();
            for (k, t) in take_prefix(&format!("params/{name}")) {
                g.insert(k, t)?;
            }
            Ok(g)
        };
        let params = NetParams {
            segmentor: group("segmentor")?,
            generator: group("generator")?,
            discriminator: group("discriminator")?,
        };
        let expected = param_shapes(&header.net).map_err(|e| corrupt(e.to_string()))?;
        for ((name, got), want) in params.groups().into_iter().zip(&expected) {
            let got: BTreeMap<String, Vec<usize>> = got
                .iter()
                .map(|(k, v)| (k.clone(), v.dims().to_vec()))
                .collect();
            if &got != want {
                return Err(corrupt(format!(
                    "{name} parameters do not match the stored network config"
                )));
            }
        }

        let mut optim = |name: &str, g: &ParamGroup| -> Result<Adam> {
            let h = header
                .optim
                .get(name)
                .ok_or_else(|| corrupt(format!("missing optimizer state for {name}")))?;
            let m = take_prefix(&format!("adam/{name}/m"));
            let v = take_prefix(&format!("adam/{name}/v"));
            let names: Vec<&String> = g.names().collect();
            if m.keys().collect::<Vec<_>>() != names || v.keys().collect::<Vec<_>>() != names {
                return Err(corrupt(format!(
                    "optimizer state for {name} does not cover its parameters"
                )));
            }
            Ok(Adam {
                hyper: h.hyper,
                t: h.t,
                m,
                v,
            })
        };
        let optim = Optimizers {
            segmentor: optim("segmentor", &params.segmentor)?,
            generator: optim("generator", &params.generator)?,
            discriminator: optim("discriminator", &params.discriminator)?,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            net: header.net,
            params,
            optim,
            step: header.step,
            data_rng: header.data_rng,
            noise_rng: header.noise_rng,
            train_hash: header.train_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
