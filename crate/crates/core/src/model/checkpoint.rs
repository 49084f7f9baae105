//! Binary model checkpoints.
//!
//! ```text
//! magic        8 bytes  "TNTSCKPT"
//! version      u32 LE
//! header_len   u64 LE
//! header       JSON: schema_version, feature_count, seed, genome,
//!              parameter_tensors, stat_tensors
//! tensors      per tensor: rows u64 LE, cols u64 LE, rows*cols f64 LE
//! ```
//!
//! Tensors follow the model's declaration order: every parameter, then one
//! `2 x d` tensor (mean row, variance row) per batch-norm layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::genome::Genome;
use super::network::AnomalyModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TNTSCKPT";
pub const VERSION: u32 = 1;
const MAX_HEADER: u64 = 1 << 20;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    feature_count: usize,
    seed: u64,
    genome: Genome,
    parameter_tensors: usize,
    stat_tensors: usize,
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &AnomalyModel) -> Vec<u8> {
    let header = Header {
        schema_version: VERSION,
        feature_count: model.feature_count(),
        seed: model.seed(),
        genome: model.genome().clone(),
        parameter_tensors: model.parameters().len(),
        stat_tensors: model.running_stats().len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.parameters() {
        put_tensor(&mut out, t);
    }
    for s in model.running_stats() {
        let mut data = s.mean.clone();
        data.extend_from_slice(&s.var);
        put_tensor(&mut out, &Tensor::from_vec(2, s.mean.len(), data).expect("sized"));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, expect: [usize; 2], name: &str) -> Result<Tensor> {
        let rows = self.u64(name)?;
        let cols = self.u64(name)?;
        if [rows, cols] != [expect[0] as u64, expect[1] as u64] {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape [{rows}, {cols}], model expects {expect:?}"
            )));
        }
        let raw = self.take(expect[0] * expect[1] * 8, name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::from_vec(expect[0], expect[1], data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<AnomalyModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64("header length")?;
    if len > MAX_HEADER {
        return Err(Error::Checkpoint(format!("header length {len} exceeds {MAX_HEADER}")));
    }
    let header: Header = serde_json::from_slice(r.take(len as usize, "header")?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.schema_version != VERSION {
        return Err(Error::Checkpoint(format!("header schema_version {}", header.schema_version)));
    }
    let mut model = AnomalyModel::build(&header.genome, header.feature_count, header.seed)?;
    if header.parameter_tensors != model.parameters().len() || header.stat_tensors != model.running_stats().len() {
        return Err(Error::Checkpoint(format!(
            "header lists {} parameter and {} statistics tensors, genome implies {} and {}",
            header.parameter_tensors,
            header.stat_tensors,
            model.parameters().len(),
            model.running_stats().len()
        )));
    }
    let names = model.parameter_names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let shape = model.parameters()[i].shape();
        model.parameters_mut()[i] = r.tensor(shape, name)?;
    }
    for i in 0..model.running_stats().len() {
        let d = model.running_stats()[i].mean.len();
        let t = r.tensor([2, d], "running statistics")?;
        let s = &mut model.running_stats_mut()[i];
        s.mean = t.row(0).to_vec();
        s.var = t.row(1).to_vec();
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &AnomalyModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<AnomalyModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
