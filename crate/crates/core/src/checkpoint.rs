//! Versioned binary container for model parameters.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "HCPT1" | u64 header_len | header (UTF-8 "key = value" lines)
//! repeated: u32 name_len | name | u32 ndim | u64 dims.. | f64 values..
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"HCPT1";

pub fn encode(model: &Model) -> Vec<u8> {
    let mut header = String::new();
    for (k, v) in model.config.pairs() {
        header.push_str(&format!("{k} = {v}\n"));
    }
    header.push_str(&format!("tensors = {}\n", model.params.len()));
    let mut out = Vec::with_capacity(model.num_params() * 8 + header.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend((header.len() as u64).to_le_bytes());
    out.extend(header.as_bytes());
    for id in model.params.ids() {
        let name = model.params.name(id).as_bytes();
        let t = model.params.value(id);
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name);
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Config and named tensors stored in a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(5)]).into_owned();
        return Err(Error::Checkpoint(format!("expected format {}, found '{found}'", "HCPT1")));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let hlen = r.u64()? as usize;
    let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let mut cfg = ModelConfig::default();
    let mut count = None;
    for line in header.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad header line '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "tensors" {
            count = Some(v.parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad tensor count '{v}'")))?);
        } else {
            cfg.set(k, v).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
    }
    let count = count.ok_or_else(|| Error::Checkpoint("header lacks tensor count".into()))?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let nd = r.u32()? as usize;
        let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(len * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((cfg, tensors))
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. With `expected`, its architecture must match.
pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (cfg, tensors) = decode(&bytes)?;
    if let Some(want) = expected {
        if !want.same_architecture(&cfg) {
            let diffs: Vec<String> = want
                .pairs()
                .into_iter()
                .zip(cfg.pairs())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("{} {} vs {}", a.0, b.1, a.1))
                .collect();
            return Err(Error::Checkpoint(format!(
                "HCPT1 checkpoint {} does not match the configured model: {}",
                path.display(),
                diffs.join(", ")
            )));
        }
    }
    let mut model = Model::new(cfg)?;
    model.load_params(tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = ModelConfig::tiny();
        cfg.zero_init_heads = false;
        cfg.zeta = 0.1 + 0.2;
        let m = Model::new(cfg.clone()).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..5], b"HCPT1");
        let (back_cfg, tensors) = decode(&bytes).unwrap();
        assert_eq!(back_cfg, cfg);
        for (id, (name, t)) in m.params.ids().zip(&tensors) {
            assert_eq!(m.params.name(id), name);
            assert_eq!(m.params.value(id), t);
        }
    }

    #[test]
    fn bad_inputs() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let bytes = encode(&m);
        assert!(decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string().contains("truncated"));
        assert!(decode(b"HCPT0....").unwrap_err().to_string().contains("HCPT1"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &m).unwrap();
        let mut other = ModelConfig::tiny();
        other.width = 16;
        let msg = load(&p, Some(&other)).unwrap_err().to_string();
        assert!(msg.contains("HCPT1") && msg.contains("width"), "{msg}");
        let mut same = ModelConfig::tiny();
        same.tau = 0.0;
        assert!(load(&p, Some(&same)).is_ok());
    }
}
