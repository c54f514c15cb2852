use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ModelConfig, Network};
use crate::optim::AdamState;
use crate::params::ParamSet;
use crate::NetError;

const MAGIC: &[u8; 8] = b"LPCKPT\0\x01";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    /// SHA-256 of the model config JSON.
    pub config_hash: String,
    pub model: ModelConfig,
    pub vocab_size: usize,
    /// Stage the next epoch belongs to (1 or 2).
    pub stage: u8,
    /// Epochs completed within `stage`.
    pub epoch: usize,
    /// Optimizer steps taken within `stage`.
    pub step: u64,
    pub optimizer_state: bool,
}

/// Immutable snapshot of a network and, optionally, its optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub network: Network,
    pub adam: Option<AdamState>,
}

pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

impl Checkpoint {
    pub fn new(network: Network, stage: u8, epoch: usize, adam: Option<AdamState>) -> Self {
        let header = CheckpointHeader {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash(&network.cfg),
            model: network.cfg.clone(),
            vocab_size: network.vocab_size,
            stage,
            epoch,
            step: adam.as_ref().map_or(0, |a| a.step),
            optimizer_state: adam.is_some(),
        };
        Self { header, network, adam }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), NetError> {
    let header = serde_json::to_vec(&ckpt.header)?;
    let ps = &ckpt.network.params;
    let mut out = Vec::with_capacity(header.len() + 4 * ps.num_values() * 3 + 4096);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    let n_arrays = if ckpt.adam.is_some() { 3 * ps.len() } else { ps.len() };
    put_u32(&mut out, n_arrays as u32);
    for i in 0..ps.len() {
        put_array(&mut out, ps.name(i), ps.shape(i), ps.data(i));
    }
    if let Some(adam) = &ckpt.adam {
        for (prefix, moments) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
            for i in 0..ps.len() {
                put_array(&mut out, &format!("{prefix}{}", ps.name(i)), ps.shape(i), &moments[i]);
            }
        }
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NetError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn array(&mut self) -> Result<(String, Vec<usize>, Vec<f64>), NetError> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| NetError::Checkpoint("array name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| NetError::Checkpoint("array too large".into()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        Ok((name, shape, data))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported schema version {}", header.schema_version)));
    }
    if header.config_hash != config_hash(&header.model) {
        return Err(NetError::Checkpoint("config hash does not match the stored config".into()));
    }
    let mut network = Network::new(header.model.clone(), 0)?;
    if network.vocab_size != header.vocab_size {
        return Err(NetError::Checkpoint(format!("vocabulary size {} != {}", header.vocab_size, network.vocab_size)));
    }
    let n_params = network.params.len();
    let expected = if header.optimizer_state { 3 * n_params } else { n_params };
    let n_arrays = r.u32()? as usize;
    if n_arrays != expected {
        return Err(NetError::Checkpoint(format!("{n_arrays} arrays, expected {expected}")));
    }
    let mut adam = header.optimizer_state.then(|| AdamState::new(&network.params));
    for k in 0..n_arrays {
        let (name, shape, data) = r.array()?;
        let i = k % n_params;
        let want = match k / n_params {
            0 => network.params.name(i).to_string(),
            1 => format!("adam.m.{}", network.params.name(i)),
            _ => format!("adam.v.{}", network.params.name(i)),
        };
        if name != want || shape != network.params.shape(i) {
            return Err(NetError::Checkpoint(format!(
                "array {k}: found `{name}` {shape:?}, expected `{want}` {:?}",
                network.params.shape(i)
            )));
        }
        match (k / n_params, adam.as_mut()) {
            (0, _) => *network.params.data_mut(i) = data,
            (1, Some(a)) => a.m[i] = data,
            (_, Some(a)) => a.v[i] = data,
            _ => unreachable!("moments only present with optimizer state"),
        }
    }
    if r.pos != buf.len() {
        return Err(NetError::Checkpoint("trailing bytes".into()));
    }
    if let Some(a) = adam.as_mut() {
        a.step = header.step;
    }
    Ok(Checkpoint { header, network, adam })
}

/// Copies every parameter named with `prefix` from `src`; names and shapes must match.
pub fn copy_prefix(dst: &mut ParamSet, src: &ParamSet, prefix: &str) -> Result<(), NetError> {
    for i in 0..src.len() {
        let name = src.name(i);
        if !name.starts_with(prefix) {
            continue;
        }
        let j = dst.id(name).ok_or_else(|| NetError::Checkpoint(format!("missing parameter `{name}`")))?;
        if dst.shape(j) != src.shape(i) {
            return Err(NetError::Checkpoint(format!("shape mismatch for `{name}`")));
        }
        *dst.data_mut(j) = src.data(i).to_vec();
    }
    Ok(())
}
