//! Binary checkpoint format.
//!
//! ```text
//! "ZFLW"  version:u32=1  count:u32
//! count × { name_len:u16  name:utf8  rank:u8  extents:u32×rank  data:f32×Πextents }
//! ```
//!
//! All integers and floats are little-endian. Adam moments are stored as
//! `<name>.m1` / `<name>.m2` and the step counter as `optimizer.step`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{Adam, Moments};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ZFLW";
pub const VERSION: u32 = 1;
pub const STEP_KEY: &str = "optimizer.step";

pub type Entries = Vec<(String, Tensor<f32>)>;

pub fn encode(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::contract("checkpoint", format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::contract("checkpoint", format!("rank too large: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Entries> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(4, "magic")? != MAGIC {
        cur.pos = 0;
        return Err(cur.fail("bad magic, expected ZFLW"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        cur.pos -= 4;
        return Err(cur.fail(format!("unsupported version {version}")));
    }
    let count = cur.u32("tensor count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap());
        let start = cur.pos;
        let raw_name = cur.take(len as usize, "name")?;
        let name = std::str::from_utf8(raw_name)
            .map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset: start as u64,
                detail: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u32("extent")? as usize;
            if d == 0 {
                cur.pos -= 4;
                return Err(cur.fail(format!("zero extent in {name}")));
            }
            shape.push(d);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(cur.fail("trailing bytes after last tensor"));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode(entries)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Entries> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Parameters (and optionally Adam state) as checkpoint entries, in store order.
pub fn snapshot<T: Scalar>(store: &ParamStore<T>, adam: Option<&Adam<T>>) -> Entries {
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        out.push((p.name.clone(), p.value.cast()));
        if let Some(m) = adam.and_then(|a| a.moments(id)) {
            out.push((format!("{}.m1", p.name), m.m1.cast()));
            out.push((format!("{}.m2", p.name), m.m2.cast()));
        }
    }
    if let Some(a) = adam {
        out.push((STEP_KEY.to_string(), Tensor::scalar(a.steps_taken() as f32)));
    }
    out
}

/// Loads parameter values (and Adam state when given) from checkpoint entries.
/// Every parameter in the store must be present.
pub fn restore<T: Scalar>(
    entries: &[(String, Tensor<f32>)],
    store: &mut ParamStore<T>,
    adam: Option<&mut Adam<T>>,
) -> Result<()> {
    let by_name: BTreeMap<&str, &Tensor<f32>> =
        entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let names: Vec<(crate::params::ParamId, String)> =
        store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    let mut moments = BTreeMap::new();
    for (id, name) in &names {
        let t = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
        store.set_value(name, t.cast())?;
        if let (Some(m1), Some(m2)) = (
            by_name.get(format!("{name}.m1").as_str()),
            by_name.get(format!("{name}.m2").as_str()),
        ) {
            moments.insert(
                *id,
                Moments {
                    m1: m1.cast(),
                    m2: m2.cast(),
                },
            );
        }
    }
    if let Some(adam) = adam {
        let step = by_name.get(STEP_KEY).map(|t| t.item() as u64).unwrap_or(0);
        adam.restore(step, moments);
    }
    Ok(())
}
