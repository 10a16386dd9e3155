//! Binary checkpoint of every parameter and buffer in a store.
//!
//! Layout, all integers little-endian:
//! `b"MFSA"`, version `u32`, record count `u32`, then per record the name
//! length `u32`, UTF-8 name, dtype tag `u8` (0 = f32, 1 = f64), rank `u32`,
//! each dim as `u32`, and the values. Parameters come first in creation
//! order, then buffers. Orthogonalized weights are stored as their raw
//! proxies.

use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MFSA";
pub const VERSION: u32 = 1;

/// One named tensor read back from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn write_record<T: Real>(out: &mut Vec<u8>, name: &str, value: &Tensor<T>) {
    push_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    push_u32(out, value.rank());
    for &d in value.shape() {
        push_u32(out, d);
    }
    for &v in value.data() {
        v.write_le(out);
    }
}

pub fn to_bytes<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_u32(&mut out, store.params().len() + store.buffers().len());
    for p in store.params() {
        write_record(&mut out, &p.name, &p.value);
    }
    for b in store.buffers() {
        write_record(&mut out, &b.name, &b.value);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::invalid("checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn read_values<T: Real>(bytes: &[u8], n: usize) -> Vec<f64> {
    let size = T::DTYPE.size();
    bytes.chunks_exact(size).take(n).map(|c| T::read_le(c).f64()).collect()
}

pub fn parse(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::invalid("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::invalid(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::invalid("checkpoint record name is not UTF-8"))?
            .to_string();
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::invalid(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::invalid(format!("{name}: shape overflows")))?;
        let raw = r.take(
            n.checked_mul(dtype.size())
                .ok_or_else(|| Error::invalid(format!("{name}: shape overflows")))?,
        )?;
        let data = match dtype {
            DType::F32 => read_values::<f32>(raw, n),
            DType::F64 => read_values::<f64>(raw, n),
        };
        records.push(Record { name, dtype, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid("trailing bytes after checkpoint records"));
    }
    Ok(records)
}

/// Overwrites every parameter and buffer of `store` from `bytes`. The
/// checkpoint must hold exactly the store's names, shapes and dtype.
pub fn load_bytes<T: Real>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let records = parse(bytes)?;
    let expected = store.params().len() + store.buffers().len();
    if records.len() != expected {
        return Err(Error::invalid(format!(
            "checkpoint has {} tensors, model has {expected}",
            records.len()
        )));
    }
    for rec in records {
        if rec.dtype != T::DTYPE {
            return Err(Error::invalid(format!(
                "{}: checkpoint dtype {:?} does not match model dtype {:?}",
                rec.name,
                rec.dtype,
                T::DTYPE
            )));
        }
        let target = if let Some(id) = store.id(&rec.name) {
            &mut store.get_mut(id).value
        } else if let Some(id) = store.buffer_id(&rec.name) {
            store.buffer_mut(id)
        } else {
            return Err(Error::invalid(format!("checkpoint tensor {} is not in the model", rec.name)));
        };
        if target.shape() != rec.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint load",
                lhs: target.shape().to_vec(),
                rhs: rec.shape,
            });
        }
        for (dst, &src) in target.data_mut().iter_mut().zip(&rec.data) {
            *dst = T::c(src);
        }
    }
    Ok(())
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_bytes(store, &bytes).map_err(|e| Error::file(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamKind;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0), ParamKind::Weight)
            .unwrap();
        s.add("a.bias", Tensor::full([2], 0.25), ParamKind::Bias).unwrap();
        s.add_buffer("bn.running_var", Tensor::ones([2])).unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let src = store();
        let bytes = to_bytes(&src);
        assert_eq!(&bytes[..4], MAGIC);
        let mut dst = store();
        for p in dst.params_mut() {
            p.value = p.value.map(|_| 7.0);
        }
        load_bytes(&mut dst, &bytes).unwrap();
        for (p, q) in src.params().iter().zip(dst.params()) {
            assert_eq!(p.value, q.value);
        }
        assert_eq!(to_bytes(&dst), bytes);
    }

    #[test]
    fn layout_of_first_record() {
        let bytes = to_bytes(&store());
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"a.weight");
        assert_eq!(bytes[24], 0);
        let recs = parse(&bytes).unwrap();
        assert_eq!(recs[0].shape, vec![2, 3]);
        assert_eq!(recs[2].name, "bn.running_var");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&store());
        let mut s = store();
        assert!(load_bytes(&mut s, &bytes[..bytes.len() - 1]).is_err());
        assert!(load_bytes(&mut s, b"NOPE\x01\0\0\0\0\0\0\0").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_bytes(&mut s, &extra).is_err());
        let mut f64_store = ParamStore::<f64>::new();
        f64_store
            .add("a.weight", Tensor::zeros([2, 3]), ParamKind::Weight)
            .unwrap();
        f64_store.add("a.bias", Tensor::zeros([2]), ParamKind::Bias).unwrap();
        f64_store.add_buffer("bn.running_var", Tensor::ones([2])).unwrap();
        assert!(load_bytes(&mut f64_store, &bytes).is_err());
    }
}
