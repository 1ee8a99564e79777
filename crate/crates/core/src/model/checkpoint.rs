//! The `AZWT` weight file format.
//!
//! Layout (little-endian): magic `AZWT`, `u32` version (1), `u32` tensor
//! count, then per tensor a `u16` name length, the UTF-8 name, a `u8` rank,
//! `u32` dims and the raw `f64` values. Running statistics are stored
//! alongside trainable parameters, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AZWT";
const VERSION: u32 = 1;

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an AZWT checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported AZWT version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} overflows")))?;
        let data = r.take(numel)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Writes every entry of `stores`, in order, to `path`.
pub fn save(path: &Path, stores: &[&ParamStore]) -> Result<()> {
    let bytes = encode(stores.iter().flat_map(|s| s.iter().map(|(_, p)| (p.name.as_str(), &p.value))))?;
    let tmp = path.with_extension("azwt.partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Replaces the values in `stores` with the tensors of a decoded checkpoint.
/// The checkpoint must contain exactly the stores' names with matching
/// shapes; nothing is modified unless everything matches.
pub fn assign(entries: Vec<(String, Tensor)>, stores: &mut [&mut ParamStore]) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    for (name, t) in entries {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::ParameterMismatch { name, detail: "appears twice in checkpoint".into() });
        }
    }
    for store in stores.iter() {
        for (_, p) in store.iter() {
            match by_name.get(&p.name) {
                None => {
                    return Err(Error::ParameterMismatch {
                        name: p.name.clone(),
                        detail: "missing from checkpoint".into(),
                    })
                }
                Some(t) if t.shape() != p.value.shape() => {
                    return Err(Error::ParameterMismatch {
                        name: p.name.clone(),
                        detail: format!("checkpoint shape {:?}, network shape {:?}", t.shape(), p.value.shape()),
                    })
                }
                Some(_) => {}
            }
        }
    }
    let expected: usize = stores.iter().map(|s| s.len()).sum();
    if by_name.len() != expected {
        let mut extra: Vec<&String> = by_name.keys().filter(|n| stores.iter().all(|s| s.find(n).is_none())).collect();
        extra.sort();
        return Err(Error::ParameterMismatch {
            name: extra[0].clone(),
            detail: "not a parameter of this network".into(),
        });
    }
    for store in stores.iter_mut() {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            *store.value_mut(id) = by_name.remove(&name).expect("checked above");
        }
    }
    Ok(())
}

pub fn load(path: &Path, stores: &mut [&mut ParamStore]) -> Result<()> {
    assign(decode(&fs::read(path)?)?, stores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let a = Tensor::new(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0, 1e300, -7.25]).unwrap();
        let b = Tensor::scalar(0.1);
        let bytes = encode([("a", &a), ("bé", &b)]).unwrap();
        assert_eq!(&bytes[..4], b"AZWT");
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[1].0, "bé");
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[1].1.shape(), &[1]);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = encode([("w", &t)]).unwrap();
        for cut in 0..bytes.len() {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
    }
}
