//! Single-file training checkpoints.
//!
//! Layout: the magic bytes, a little-endian `u64` header length, a JSON header with
//! configs, counters and a tensor index, then the raw little-endian tensor data.
//! Tensors keep their dtype, so parameters round-trip bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::NodeCountDistribution;
use crate::error::{Error, Result};
use crate::pgsn::PgsnConfig;
use crate::sde::VpSdeSchedule;
use crate::train::TrainConfig;

const MAGIC: &[u8; 8] = b"GDIFFCK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    pgsn: PgsnConfig,
    sde: VpSdeSchedule,
    train: TrainConfig,
    step: u64,
    adam_step: u64,
    node_counts: Option<NodeCountDistribution>,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub pgsn: PgsnConfig,
    pub sde: VpSdeSchedule,
    pub train: TrainConfig,
    pub step: u64,
    pub adam_step: u64,
    /// Training-set node-count pmf, used when sampling.
    pub node_counts: Option<NodeCountDistribution>,
    pub dtype: DType,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub ema: Vec<Tensor>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

const GROUPS: [&str; 4] = ["param", "ema", "adam_m", "adam_v"];

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend(v.to_le_bytes())),
        DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend(v.to_le_bytes())),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
    Ok(())
}

fn tensor_from_bytes(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        _ => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
    };
    Ok(t)
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let n = self.names.len();
        for (g, set) in GROUPS.iter().zip([&self.params, &self.ema, &self.adam_m, &self.adam_v]) {
            if set.len() != n {
                return Err(Error::Checkpoint(format!("{g} has {} tensors, expected {n}", set.len())));
            }
        }
        let mut data = Vec::new();
        let mut tensors = Vec::with_capacity(4 * n);
        for (g, set) in GROUPS.iter().zip([&self.params, &self.ema, &self.adam_m, &self.adam_v]) {
            for (name, t) in self.names.iter().zip(set.iter()) {
                let offset = data.len();
                tensor_bytes(&t.to_dtype(self.dtype)?, &mut data)?;
                tensors.push(TensorEntry {
                    group: g.to_string(),
                    name: name.clone(),
                    shape: t.dims().to_vec(),
                    offset,
                    len: data.len() - offset,
                });
            }
        }
        let header = Header {
            pgsn: self.pgsn.clone(),
            sde: self.sde,
            train: self.train.clone(),
            step: self.step,
            adam_step: self.adam_step,
            node_counts: self.node_counts.clone(),
            dtype: dtype_name(self.dtype)?.into(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&(json.len() as u64).to_le_bytes())?;
            f.write_all(&json)?;
            f.write_all(&data)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(crate::error::file_err(path))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16 + hlen;
        if bytes.len() < body {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        let dtype = match header.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            _ => return Err(bad("unknown dtype")),
        };
        let data = &bytes[body..];
        let mut groups: [Vec<Tensor>; 4] = Default::default();
        let mut names = Vec::new();
        for entry in &header.tensors {
            let g = GROUPS
                .iter()
                .position(|&g| g == entry.group)
                .ok_or_else(|| bad("unknown tensor group"))?;
            let end = entry.offset + entry.len;
            if end > data.len() {
                return Err(bad("tensor data out of range"));
            }
            if g == 0 {
                names.push(entry.name.clone());
            }
            groups[g].push(tensor_from_bytes(&data[entry.offset..end], &entry.shape, dtype)?);
        }
        let [params, ema, adam_m, adam_v] = groups;
        if [ema.len(), adam_m.len(), adam_v.len()].iter().any(|&l| l != params.len()) {
            return Err(bad("tensor groups differ in length"));
        }
        Ok(Self {
            pgsn: header.pgsn,
            sde: header.sde,
            train: header.train,
            step: header.step,
            adam_step: header.adam_step,
            node_counts: header.node_counts,
            dtype,
            names,
            params,
            ema,
            adam_m,
            adam_v,
        })
    }
}
