use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DTYPE_F32: u8 = 0x01;

pub fn tensor_header_len(t: &Tensor) -> usize {
    2 + 4 * t.rank()
}

pub fn tensor_payload_len(t: &Tensor) -> usize {
    4 * t.len()
}

/// Encodes as 32-bit little-endian floats. Values are rounded to nearest `f32`.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Wire(format!("rank {} does not fit in one byte", t.rank())))?;
    let mut out = Vec::with_capacity(tensor_header_len(t) + tensor_payload_len(t));
    out.push(DTYPE_F32);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Wire(format!("dimension {d} exceeds 32 bits")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`encode_tensor`]; the buffer must hold exactly one tensor.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let [dtype, rank, rest @ ..] = bytes else {
        return Err(Error::Wire(format!("tensor header truncated ({} bytes)", bytes.len())));
    };
    if *dtype != DTYPE_F32 {
        return Err(Error::Wire(format!("unknown dtype tag {dtype:#04x}")));
    }
    let rank = *rank as usize;
    if rank == 0 {
        return Err(Error::Wire("tensor rank must be at least 1".into()));
    }
    if rest.len() < 4 * rank {
        return Err(Error::Wire(format!(
            "tensor dims truncated: need {} bytes, have {}",
            4 * rank,
            rest.len()
        )));
    }
    let (dims_bytes, payload) = rest.split_at(4 * rank);
    let dims: Vec<usize> = dims_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(Error::Wire(format!("zero-sized dimension in {dims:?}")));
    }
    let expected = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Wire(format!("element count of {dims:?} overflows")))?;
    if payload.len() != expected {
        return Err(Error::Wire(format!(
            "payload length mismatch: dims {dims:?} need {expected} bytes, have {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(dims, data)
}
