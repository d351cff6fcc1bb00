//! Checkpoint container: every parameter tensor, both optimizer states, the
//! schedule position, and the config digest, in one binary file.
//!
//! Layout: 16-byte magic/version header, length-prefixed JSON metadata, then
//! raw little-endian f32 tensors (parameters, then first and second moments
//! of each optimizer). Save -> load -> save is byte-identical.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::FieldgenError;
use crate::tensor::{AdamWConfig, Tensor};

const CKPT_MAGIC: &[u8; 8] = b"FGENCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptMeta {
    step: u64,
    cfg: AdamWConfig,
    params: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    config_digest: String,
    master_seed: u64,
    latent_scale: f64,
    vae_epochs_done: u64,
    epochs_done: u64,
    params: Vec<TensorMeta>,
    opt_vae: OptMeta,
    opt_main: OptMeta,
}

/// One optimizer's persisted state.
#[derive(Clone, Debug)]
pub struct OptState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub param_names: Vec<String>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

/// Everything needed to reproduce a training position exactly.
#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub config_digest: String,
    pub master_seed: u64,
    /// Diffusion-space latent standardization factor.
    pub latent_scale: f64,
    pub vae_epochs_done: u64,
    pub epochs_done: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub opt_vae: OptState,
    pub opt_main: OptState,
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(data: &CheckpointData) -> Result<Vec<u8>, FieldgenError> {
    let header = CheckpointHeader {
        format_version: CKPT_VERSION,
        config_digest: data.config_digest.clone(),
        master_seed: data.master_seed,
        latent_scale: data.latent_scale,
        vae_epochs_done: data.vae_epochs_done,
        epochs_done: data.epochs_done,
        params: data
            .params
            .iter()
            .map(|(n, t)| TensorMeta { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
        opt_vae: OptMeta {
            step: data.opt_vae.step,
            cfg: data.opt_vae.cfg,
            params: data.opt_vae.param_names.clone(),
        },
        opt_main: OptMeta {
            step: data.opt_main.step,
            cfg: data.opt_main.cfg,
            params: data.opt_main.param_names.clone(),
        },
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| FieldgenError::Config(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &data.params {
        push_tensor(&mut out, t);
    }
    for opt in [&data.opt_vae, &data.opt_main] {
        for t in opt.m.iter().chain(opt.v.iter()) {
            push_tensor(&mut out, t);
        }
    }
    Ok(out)
}

pub fn write_checkpoint(data: &CheckpointData, path: &Path) -> Result<(), FieldgenError> {
    let bytes = encode_checkpoint(data)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointData, FieldgenError> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8], FieldgenError> {
        if cur.len() < n {
            return Err(FieldgenError::Numeric(format!(
                "truncated checkpoint: wanted {n} more bytes, have {}",
                cur.len()
            )));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    let magic = take(8)?;
    if magic != CKPT_MAGIC {
        return Err(FieldgenError::Config("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(FieldgenError::Config(format!(
            "unknown checkpoint version {version}, expected {CKPT_VERSION}"
        )));
    }
    take(4)?;
    let json_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(json_len)?)
        .map_err(|e| FieldgenError::Config(format!("checkpoint header: {e}")))?;

    let mut read_tensor = |shape: &[usize]| -> Result<Tensor<f32>, FieldgenError> {
        let n: usize = shape.iter().product();
        let raw = take(4 * n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape, data).map_err(FieldgenError::Tensor)
    };

    let mut params = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        params.push((meta.name.clone(), read_tensor(&meta.shape)?));
    }
    let shape_of = |name: &str| -> Result<Vec<usize>, FieldgenError> {
        params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape().to_vec())
            .ok_or_else(|| {
                FieldgenError::Config(format!("optimizer references unknown parameter {name}"))
            })
    };
    let mut read_opt = |meta: &OptMeta| -> Result<OptState, FieldgenError> {
        let shapes: Vec<Vec<usize>> =
            meta.params.iter().map(|n| shape_of(n)).collect::<Result<_, _>>()?;
        let mut m = Vec::with_capacity(shapes.len());
        for s in &shapes {
            m.push(read_tensor(s)?);
        }
        let mut v = Vec::with_capacity(shapes.len());
        for s in &shapes {
            v.push(read_tensor(s)?);
        }
        Ok(OptState { cfg: meta.cfg, step: meta.step, param_names: meta.params.clone(), m, v })
    };
    let opt_vae = read_opt(&header.opt_vae)?;
    let opt_main = read_opt(&header.opt_main)?;
    if !cur.is_empty() {
        return Err(FieldgenError::Config(format!(
            "{} trailing bytes after checkpoint payload",
            cur.len()
        )));
    }
    Ok(CheckpointData {
        config_digest: header.config_digest,
        master_seed: header.master_seed,
        latent_scale: header.latent_scale,
        vae_epochs_done: header.vae_epochs_done,
        epochs_done: header.epochs_done,
        params,
        opt_vae,
        opt_main,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData, FieldgenError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
