//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 5 | ASCII `TCSIS` |
//! | 4 | `u32` format version (1) |
//! | 4 | `u32` header length `H` |
//! | H | UTF-8 JSON header |
//! | 8·P | `f64` parameters |
//! | 8·P | `f64` EMA shadow parameters |
//!
//! `P` is `n_params` from the header. Parameters are concatenated layer by
//! layer; each dense layer stores its weight matrix input-major followed by its
//! bias. The density head appends the two gate layers after the trunk.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Head, Network, NetworkSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TCSIS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    version: u32,
    head: Head,
    dims: [usize; 2],
    hidden: Vec<usize>,
    time_dim: usize,
    gate_hidden: usize,
    seed: u64,
    n_params: usize,
    step: u64,
    #[serde(default)]
    energy_reference: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub ema: Vec<f64>,
    pub seed: u64,
    pub step: u64,
    /// Constant subtracted from the log target density before it enters a
    /// density network; zero for score networks.
    pub energy_reference: f64,
}

impl Checkpoint {
    /// The network carrying the moving-average weights.
    pub fn ema_network(&self) -> Result<Network> {
        self.network.with_params(&self.ema)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let spec = ckpt.network.spec();
    let n = ckpt.network.param_count();
    if ckpt.ema.len() != n {
        return Err(Error::InvalidInput("EMA length does not match the network".into()));
    }
    let header = Header {
        magic: "TCSIS".into(),
        version: CHECKPOINT_VERSION,
        head: spec.head,
        dims: [spec.dim, spec.vocab],
        hidden: spec.hidden.clone(),
        time_dim: spec.time_dim,
        gate_hidden: spec.gate_hidden,
        seed: ckpt.seed,
        n_params: n,
        step: ckpt.step,
        energy_reference: ckpt.energy_reference,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(13 + json.len() + 16 * n);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in ckpt.network.params().iter().chain(&ckpt.ema) {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
        return format_err(format!("{} is not a checkpoint", path.display()));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return format_err(format!("unsupported checkpoint version {version}"));
    }
    let hlen = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let Some(json) = bytes.get(13..13 + hlen) else {
        return format_err("truncated checkpoint header");
    };
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.magic != "TCSIS" || header.version != version {
        return format_err("checkpoint header disagrees with the file prefix");
    }
    let spec = NetworkSpec {
        dim: header.dims[0],
        vocab: header.dims[1],
        hidden: header.hidden,
        time_dim: header.time_dim,
        gate_hidden: header.gate_hidden,
        head: header.head,
    };
    let mut network = Network::zeros(spec).map_err(|e| Error::Format(format!("checkpoint describes an invalid network: {e}")))?;
    let n = network.param_count();
    if n != header.n_params {
        return format_err(format!("header claims {} parameters, architecture has {n}", header.n_params));
    }
    let body = &bytes[13 + hlen..];
    if body.len() != 16 * n {
        return format_err(format!("expected {} parameter bytes, found {}", 16 * n, body.len()));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return format_err("checkpoint contains non-finite parameters");
    }
    network.set_params(&values[..n])?;
    Ok(Checkpoint {
        network,
        ema: values[n..].to_vec(),
        seed: header.seed,
        step: header.step,
        energy_reference: header.energy_reference,
    })
}
