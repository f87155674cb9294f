use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{MaskTable, RoutingTrace};

const MAGIC: &[u8; 4] = b"R3MK";
const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

/// Encode a trace's masks: header then `T*L*K` little-endian `u16` expert
/// indices, layer-major within each token. Token ids are not stored.
pub fn serialize_trace(trace: &RoutingTrace) -> Vec<u8> {
    let m = trace.masks();
    let mut out = Vec::with_capacity(HEADER_LEN + m.indices().len() * 2);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [m.layers(), m.experts(), m.top_k()] {
        out.extend_from_slice(&(v as u16).to_le_bytes());
    }
    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    for &e in m.indices() {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out
}

fn err(offset: usize, reason: &'static str) -> Error {
    Error::Decode { offset, reason }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

/// Decode bytes produced by [`serialize_trace`].
pub fn deserialize_trace(bytes: &[u8]) -> Result<MaskTable> {
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "truncated magic"));
    }
    if let Some(i) = (0..4).find(|&i| bytes[i] != MAGIC[i]) {
        return Err(err(i, "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), "truncated header"));
    }
    if u16_at(bytes, 4) != VERSION {
        return Err(err(4, "unsupported version"));
    }
    let (l, m, k) = (u16_at(bytes, 6) as usize, u16_at(bytes, 8) as usize, u16_at(bytes, 10) as usize);
    if l == 0 || k == 0 || k > m {
        return Err(err(6, "invalid layer or expert counts"));
    }
    let t = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let n = t * l * k;
    let body = &bytes[HEADER_LEN..];
    if body.len() < n * 2 {
        return Err(err(bytes.len(), "truncated mask data"));
    }
    if body.len() > n * 2 {
        return Err(err(HEADER_LEN + n * 2, "trailing bytes"));
    }
    let idx: Vec<u16> = (0..n).map(|i| u16_at(body, 2 * i)).collect();
    for (c, chunk) in idx.chunks_exact(k).enumerate() {
        if chunk.windows(2).any(|w| w[0] >= w[1]) || chunk.iter().any(|&e| e as usize >= m) {
            return Err(err(HEADER_LEN + c * k * 2, "invalid mask"));
        }
    }
    MaskTable::from_indices(l, m, k, idx)
}
