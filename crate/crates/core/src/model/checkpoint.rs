//! Checkpoint values and the tensor container file format:
//! 8-byte magic (7 tag bytes + version), u64 LE header length, JSON header,
//! then the tensors as little-endian f32 in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::Net;
use super::params::{Group, Layout, ModelConfig, Params, TensorSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"CSPCKPT";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Params<f32>,
    pub step: u64,
    /// Root seed of every per-step random stream.
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    seed: u64,
    tensors: Vec<TensorSpec>,
}

impl Checkpoint {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = Params::init(&layout, seed);
        Ok(Self { config, layout, params, step: 0, seed })
    }

    pub fn net(&self) -> Net<'_, f32> {
        Net { cfg: &self.config, idx: &self.layout.index, p: &self.params.data }
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.params.tensor(&self.layout, name)
    }

    /// Zeroes the final decoder LayerNorm so every position predicts the
    /// uniform distribution (output bias is zero at init).
    pub fn zero_output_path(&mut self) {
        let i = self.layout.index.dec_ln;
        let d = self.config.d_model;
        self.params.data[i.g..i.g + d].fill(0.0);
        self.params.data[i.b..i.b + d].fill(0.0);
        let v = self.config.vocab_size;
        let o = self.layout.index.out_bias;
        self.params.data[o..o + v].fill(0.0);
    }

    pub fn group_tensors(&self, group: Group) -> impl Iterator<Item = &TensorSpec> {
        self.layout.tensors.iter().filter(move |t| t.group == group)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
            tensors: self.layout.tensors.clone(),
        };
        write_container(path, CHECKPOINT_MAGIC, &header, &[&self.params.data])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut data): (Header, _) = read_container(path, CHECKPOINT_MAGIC)?;
        header.config.validate()?;
        let layout = Layout::new(&header.config);
        if layout.tensors != header.tensors {
            return Err(Error::Format(format!("{}: tensor index does not match the config", path.display())));
        }
        let params = data.pop().filter(|d| data.is_empty() && d.len() == layout.total).ok_or_else(|| {
            Error::Format(format!("{}: expected {} parameters", path.display(), layout.total))
        })?;
        Ok(Self {
            config: header.config,
            layout,
            params: Params { data: params },
            step: header.step,
            seed: header.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    header: H,
    blocks: Vec<usize>,
}

/// Writes a header and f32 blocks to `path`.
pub fn write_container<H: Serialize>(path: &Path, magic: &[u8; 7], header: &H, blocks: &[&[f32]]) -> Result<()> {
    let env = Envelope { header, blocks: blocks.iter().map(|b| b.len()).collect() };
    let json = serde_json::to_vec(&env).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * env.blocks.iter().sum::<usize>());
    buf.extend_from_slice(magic);
    buf.push(FORMAT_VERSION);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for b in blocks {
        for v in b.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_container<H: for<'de> Deserialize<'de>>(path: &Path, magic: &[u8; 7]) -> Result<(H, Vec<Vec<f32>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..7] != magic {
        return Err(bad("bad magic"));
    }
    if bytes[7] != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[7])));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let env: Envelope<H> = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut rest = &bytes[16 + hlen..];
    if rest.len() != 4 * env.blocks.iter().sum::<usize>() {
        return Err(bad("tensor data length mismatch"));
    }
    let mut blocks = Vec::with_capacity(env.blocks.len());
    for n in env.blocks {
        let (head, tail) = rest.split_at(4 * n);
        blocks.push(head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
        rest = tail;
    }
    Ok((env.header, blocks))
}
