//! Checkpoint archive: a single file holding every parameter array keyed by
//! layer name plus the network config as JSON. Round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nd::NdArray;
use crate::network::{ModelParams, NetworkConfig};
use crate::tape::real::Real;

const MAGIC: &[u8; 8] = b"ATRGCKP1";

/// A loaded checkpoint in whichever precision it was trained.
pub enum LoadedParams {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

impl LoadedParams {
    pub fn config(&self) -> &NetworkConfig {
        match self {
            LoadedParams::F32(p) => &p.config,
            LoadedParams::F64(p) => &p.config,
        }
    }
}

pub trait CheckpointDtype: Real {
    const TAG: u8;
    fn write_one(v: Self, out: &mut Vec<u8>);
    fn read_one(bytes: &[u8]) -> Self;
}

impl CheckpointDtype for f32 {
    const TAG: u8 = 4;
    fn write_one(v: Self, out: &mut Vec<u8>) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fn read_one(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl CheckpointDtype for f64 {
    const TAG: u8 = 8;
    fn write_one(v: Self, out: &mut Vec<u8>) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fn read_one(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

pub fn save<T: CheckpointDtype>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(T::TAG);
    buf.extend_from_slice(&params.seed.to_le_bytes());

    let cfg_json =
        serde_json::to_vec(&params.config).map_err(|e| Error::json(path.to_path_buf(), e))?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);

    buf.extend_from_slice(&(params.arrays.len() as u32).to_le_bytes());
    for (name, arr) in &params.arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
        for &d in &arr.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &arr.data {
            T::write_one(v, &mut buf);
        }
    }

    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse<T: CheckpointDtype>(cur: &mut Cursor, seed: u64, cfg: NetworkConfig) -> Result<ModelParams<T>> {
    let count = cur.u32()? as usize;
    let mut arrays = BTreeMap::new();
    let width = std::mem::size_of::<T>();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("bad layer name".into()))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = cur.take(len * width)?;
        let data: Vec<T> = raw.chunks_exact(width).map(T::read_one).collect();
        arrays.insert(name, NdArray::from_vec(&shape, data));
    }
    Ok(ModelParams {
        config: cfg,
        seed,
        arrays,
    })
}

pub fn load(path: &Path) -> Result<LoadedParams> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let tag = cur.take(1)?[0];
    let seed = cur.u64()?;
    let cfg_len = cur.u32()? as usize;
    let cfg: NetworkConfig = serde_json::from_slice(cur.take(cfg_len)?)
        .map_err(|e| Error::json(path.to_path_buf(), e))?;
    match tag {
        4 => Ok(LoadedParams::F32(parse::<f32>(&mut cur, seed, cfg)?)),
        8 => Ok(LoadedParams::F64(parse::<f64>(&mut cur, seed, cfg)?)),
        t => Err(Error::Format(format!("unknown dtype tag {t}"))),
    }
}
