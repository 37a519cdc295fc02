//! Binary checkpoint format.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  b"PSGANCKP"
//! u32    format version
//! u64    header length, then a JSON header (layouts, config, step, ADAM step counts)
//! u32    tensor count
//! per tensor:
//!   u16 name length, name (UTF-8)
//!   u8  dtype (1 = f64)
//!   u8  ndim, then ndim x u64 dims
//!   raw f64 values
//! ```
//!
//! Tensors cover every parameter, every batch-norm running statistic and the
//! ADAM moments (`opt_d.m.<param>`, `opt_g.v.<param>`, ...). Values are
//! stored bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netspec::NetSpec;
use crate::noise::NoiseSpec;
use crate::trainer::{Checkpoint, TrainConfig};

pub const MAGIC: &[u8; 8] = b"PSGANCKP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    noise: NoiseSpec,
    net: NetSpec,
    train: TrainConfig,
    opt_d_t: u64,
    opt_g_t: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn collect(ck: &Checkpoint) -> Vec<(String, Vec<usize>, &[f64])> {
    let m = &ck.model;
    let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for p in m.generator.params().into_iter().chain(m.discriminator.params()) {
        out.push((p.name.clone(), p.shape.clone(), &p.value));
    }
    for b in m.generator.buffers().into_iter().chain(m.discriminator.buffers()) {
        out.push((b.name.clone(), vec![b.value.len()], &b.value));
    }
    if let Some(mlp) = &m.mlp {
        for p in mlp.params() {
            out.push((p.name.clone(), p.shape.clone(), &p.value));
        }
    }
    let d_params = m.discriminator.params();
    let g_params = m.generator_params();
    for (tag, opt, params) in [("opt_d", &ck.opt_d, &d_params), ("opt_g", &ck.opt_g, &g_params)] {
        for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
            for (p, mv) in params.iter().zip(moments) {
                out.push((format!("{tag}.{kind}.{}", p.name), p.shape.clone(), mv));
            }
        }
    }
    out
}

/// Serialize the full training state.
pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        step: ck.step,
        noise: ck.model.noise.clone(),
        net: ck.model.net.clone(),
        train: ck.config.clone(),
        opt_d_t: ck.opt_d.t,
        opt_g_t: ck.opt_g.t,
    };
    let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let tensors = collect(ck);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.push(shape.len() as u8);
        for d in &shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn assign(entries: &mut BTreeMap<String, Entry>, name: &str, shape: &[usize], dst: &mut Vec<f64>) -> Result<()> {
    let e = entries
        .remove(name)
        .ok_or_else(|| bad(format!("missing tensor {name}")))?;
    if e.shape != shape {
        return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", e.shape)));
    }
    *dst = e.data;
    Ok(())
}

/// Parse a checkpoint produced by [`to_bytes`].
pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = usize::try_from(c.u64()?).map_err(|_| bad("header too large"))?;
    let header: Header = serde_json::from_slice(c.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
    let count = c.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_owned();
        if c.u8()? != DTYPE_F64 {
            return Err(bad(format!("tensor {name} has an unknown dtype")));
        }
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(c.u64()?).map_err(|_| bad("dimension too large"))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("tensor too large"))?;
        let data = c
            .take(len)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if entries.insert(name.clone(), Entry { shape, data }).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    if c.pos != buf.len() {
        return Err(bad("trailing bytes after last tensor"));
    }

    let mut ck = Checkpoint::new(&header.noise, &header.net, &header.train)?;
    ck.step = header.step;
    let m = &mut ck.model;
    for p in m.generator.params_mut().into_iter().chain(m.discriminator.params_mut()) {
        let shape = p.shape.clone();
        assign(&mut entries, &p.name, &shape, &mut p.value)?;
    }
    for b in m.generator.buffers_mut().into_iter().chain(m.discriminator.buffers_mut()) {
        let shape = [b.value.len()];
        assign(&mut entries, &b.name, &shape, &mut b.value)?;
    }
    if let Some(mlp) = &mut m.mlp {
        for p in mlp.params_mut() {
            let shape = p.shape.clone();
            assign(&mut entries, &p.name, &shape, &mut p.value)?;
        }
    }
    let d_params: Vec<(String, Vec<usize>)> =
        m.discriminator.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    let g_params: Vec<(String, Vec<usize>)> =
        m.generator_params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    for (tag, opt, t, params) in [
        ("opt_d", &mut ck.opt_d, header.opt_d_t, &d_params),
        ("opt_g", &mut ck.opt_g, header.opt_g_t, &g_params),
    ] {
        opt.t = t;
        if t == 0 {
            continue;
        }
        for kind in ["m", "v"] {
            let mut moments = Vec::with_capacity(params.len());
            for (name, shape) in params.iter() {
                let mut v = Vec::new();
                assign(&mut entries, &format!("{tag}.{kind}.{name}"), shape, &mut v)?;
                moments.push(v);
            }
            if kind == "m" {
                opt.m = moments;
            } else {
                opt.v = moments;
            }
        }
    }
    if let Some(name) = entries.keys().next() {
        return Err(bad(format!("unexpected tensor {name}")));
    }
    Ok(ck)
}

/// Write atomically (temporary file, then rename).
pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| bad(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    from_bytes(&buf)
}
