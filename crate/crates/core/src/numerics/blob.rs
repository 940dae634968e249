//! Binary tensor blob:
//! `"UMMT" | u32 version | u32 name_len | name (UTF-8) | u8 dtype | u32 rank | u64 extents[rank] | payload`,
//! all integers and payload little-endian.

use super::element::{DType, Element};
use super::tensor::Tensor;
use crate::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"UMMT";
pub const BLOB_VERSION: u32 = 1;

pub fn write_blob<T: Element>(out: &mut Vec<u8>, name: &str, tensor: &Tensor<T>) {
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(out);
    }
}

fn take<'a>(input: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if input.len() < n {
        return Err(Error::Format(format!(
            "truncated tensor blob: need {n} bytes for {what}, {} left",
            input.len()
        )));
    }
    let (head, rest) = input.split_at(n);
    *input = rest;
    Ok(head)
}

fn u32_le(input: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(input, 4, what)?.try_into().expect("4 bytes")))
}

/// Reads one blob from the front of `input`, advancing it.
pub fn read_blob<T: Element>(input: &mut &[u8]) -> Result<(String, Tensor<T>)> {
    if take(input, 4, "magic")? != BLOB_MAGIC {
        return Err(Error::Format("bad tensor blob magic".into()));
    }
    let version = u32_le(input, "version")?;
    if version != BLOB_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor blob version {version} (expected {BLOB_VERSION})"
        )));
    }
    let name_len = u32_le(input, "name length")? as usize;
    let name = std::str::from_utf8(take(input, name_len, "name")?)
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
        .to_string();
    let tag = take(input, 1, "dtype")?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "tensor {name:?} stored as {dtype:?}, requested {:?}",
            T::DTYPE
        )));
    }
    let rank = u32_le(input, "rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = u64::from_le_bytes(take(input, 8, "extent")?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(e).map_err(|_| Error::Format("extent overflows usize".into()))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("tensor too large".into()))?;
    let width = dtype.size_of();
    let payload = take(input, numel * width, "payload")?;
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    Ok((name, Tensor::new(shape, data)?))
}
