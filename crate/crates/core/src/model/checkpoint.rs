use alloc::string::String;
use alloc::vec::Vec;

use super::{ModelConfig, PolicyParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"R3CK";
const VERSION: u16 = 1;

/// Encode parameters as a little-endian checkpoint.
pub fn encode_checkpoint(params: &PolicyParams) -> Vec<u8> {
    let c = params.config();
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.vocab, c.d_model, c.layers, c.heads, c.experts, c.top_k, c.max_seq_len, c.expert_hidden] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Decode {
                offset: self.pos,
                reason: what,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decode a checkpoint produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<PolicyParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "truncated magic")? != MAGIC {
        return Err(Error::Decode {
            offset: 0,
            reason: "bad magic",
        });
    }
    let at = r.pos;
    if r.u16("truncated version")? != VERSION {
        return Err(Error::Decode {
            offset: at,
            reason: "unsupported version",
        });
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = r.u32("truncated config")? as usize;
    }
    let config = ModelConfig {
        vocab: f[0],
        d_model: f[1],
        layers: f[2],
        heads: f[3],
        experts: f[4],
        top_k: f[5],
        max_seq_len: f[6],
        expert_hidden: f[7],
    };
    config.validate()?;
    let (_, specs) = super::Layout::for_config(&config);
    let count = r.u32("truncated tensor count")? as usize;
    if count != specs.len() {
        return Err(Error::Decode {
            offset: r.pos - 4,
            reason: "tensor count does not match the layout",
        });
    }
    let mut named = Vec::with_capacity(count);
    for (_, shape) in &specs {
        let len = r.u16("truncated name length")? as usize;
        let at = r.pos;
        let name = String::from_utf8(r.take(len, "truncated name")?.to_vec()).map_err(|_| Error::Decode {
            offset: at,
            reason: "name is not utf-8",
        })?;
        let at = r.pos;
        let n = r.u64("truncated element count")? as usize;
        if n != shape.iter().product::<usize>() {
            return Err(Error::Decode {
                offset: at,
                reason: "tensor element count does not match the layout",
            });
        }
        let raw = r.take(n.saturating_mul(8), "truncated tensor data")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Decode {
            offset: r.pos,
            reason: "trailing bytes",
        });
    }
    PolicyParams::from_tensors(config, named)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitOptions;

    fn small() -> PolicyParams {
        let cfg = ModelConfig {
            vocab: 6,
            d_model: 4,
            layers: 1,
            heads: 2,
            experts: 3,
            top_k: 2,
            max_seq_len: 8,
            expert_hidden: 3,
        };
        PolicyParams::init(cfg, InitOptions { seed: 9, ..Default::default() }).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = small();
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[..4], b"R3CK");
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn corrupt_input_reports_offset() {
        let bytes = encode_checkpoint(&small());
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Decode { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Decode { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Decode { .. })));
    }
}
