//! Binary checkpoint format.
//!
//! ```text
//! magic    b"WEFTCKPT"
//! version  u32
//! dtype    u8            (0 = f32, 1 = f64)
//! config   u64 × 6, u64 init scheme (0 = mitchell, 1 = normal),
//!          f64 × 3, u32 × 2, u64   (field order of DenoiserConfig)
//! tensors  u32 count, then per tensor:
//!          u32 name length, name bytes, u32 rank, u64 × rank dims, data
//! optim    u8 present; if 1: u64 step, f64 × 5 hyperparameters,
//!          then first and second moments in tensor order (data only)
//! crc32    u32 over every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::optim::{AdamWConfig, OptimizerState};
use super::{DType, DenoiserConfig, DenoiserParams, InitScheme, Scalar};
use crate::error::{Result, WeftError};

pub const MAGIC: &[u8; 8] = b"WEFTCKPT";
pub const VERSION: u32 = 1;

pub struct Checkpoint<F> {
    pub config: DenoiserConfig,
    pub params: DenoiserParams<F>,
    pub optimizer: Option<OptimizerState<F>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<F: Scalar>(
    config: &DenoiserConfig,
    params: &DenoiserParams<F>,
    optimizer: Option<&OptimizerState<F>>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(match F::DTYPE {
        DType::F32 => 0,
        DType::F64 => 1,
    });
    let c = config;
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.ffn_hidden, c.max_seq_len] {
        put_u64(&mut out, v as u64);
    }
    put_u64(
        &mut out,
        match c.init {
            InitScheme::Mitchell => 0,
            InitScheme::Normal => 1,
        },
    );
    for v in [c.rms_norm_eps, c.rope_theta, c.init_std] {
        put_f64(&mut out, v);
    }
    put_u32(&mut out, c.mask_token_id);
    put_u32(&mut out, c.pad_token_id);
    put_u64(&mut out, c.seed);

    let names = params.names();
    let tensors = params.tensors();
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in names.iter().zip(&tensors) {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape.len() as u32);
        for &d in &t.shape {
            put_u64(&mut out, d as u64);
        }
        t.data.iter().for_each(|x| x.write_le(&mut out));
    }

    match optimizer {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            put_u64(&mut out, st.step);
            for v in [st.hp.lr, st.hp.weight_decay, st.hp.beta1, st.hp.beta2, st.hp.eps] {
                put_f64(&mut out, v);
            }
            for moments in [&st.m, &st.v] {
                for t in moments.tensors() {
                    t.data.iter().for_each(|x| x.write_le(&mut out));
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| WeftError::Integrity("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| WeftError::Integrity("dimension overflow".into()))
    }

    fn fill<F: Scalar>(&mut self, dst: &mut [F]) -> Result<()> {
        let w = F::DTYPE.size();
        let bytes = self.take(dst.len() * w)?;
        for (x, chunk) in dst.iter_mut().zip(bytes.chunks_exact(w)) {
            *x = F::read_le(chunk);
        }
        Ok(())
    }
}

/// Element type stored in an encoded checkpoint, read from the header only.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(WeftError::Integrity("not a checkpoint (bad magic or too short)".into()));
    }
    match bytes[12] {
        0 => Ok(DType::F32),
        1 => Ok(DType::F64),
        other => Err(WeftError::Integrity(format!("unknown dtype tag {other}"))),
    }
}

pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..8] != MAGIC {
        return Err(WeftError::Integrity("not a checkpoint (bad magic or too short)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(WeftError::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeftError::Version { found: version, expected: VERSION });
    }
    let dtype = match r.u8()? {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(WeftError::Integrity(format!("unknown dtype tag {other}"))),
    };
    if dtype != F::DTYPE {
        return Err(WeftError::Integrity(format!("checkpoint holds {dtype:?}, requested {:?}", F::DTYPE)));
    }
    let dims = [r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?];
    let init = match r.u64()? {
        0 => InitScheme::Mitchell,
        1 => InitScheme::Normal,
        other => return Err(WeftError::Integrity(format!("unknown init scheme tag {other}"))),
    };
    let config = DenoiserConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        ffn_hidden: dims[4],
        max_seq_len: dims[5],
        init,
        rms_norm_eps: r.f64()?,
        rope_theta: r.f64()?,
        init_std: r.f64()?,
        mask_token_id: r.u32()?,
        pad_token_id: r.u32()?,
        seed: r.u64()?,
    };
    config.validate()?;

    let mut params = DenoiserParams::<F>::zeros_layout(&config);
    let names = params.names();
    let count = r.u32()? as usize;
    if count != names.len() {
        return Err(WeftError::Integrity(format!("expected {} tensors, found {count}", names.len())));
    }
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let len = r.u32()? as usize;
        let got = r.take(len)?;
        if got != name.as_bytes() {
            return Err(WeftError::Integrity(format!("tensor name mismatch at {name}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if shape != t.shape {
            return Err(WeftError::Integrity(format!("shape mismatch for {name}")));
        }
        r.fill(&mut t.data)?;
    }

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let hp = AdamWConfig { lr: r.f64()?, weight_decay: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
            let mut st = OptimizerState::new(&params, hp);
            st.step = step;
            for moments in [&mut st.m, &mut st.v] {
                for t in moments.tensors_mut() {
                    r.fill(&mut t.data)?;
                }
            }
            Some(st)
        }
        other => return Err(WeftError::Integrity(format!("bad optimizer flag {other}"))),
    };
    if r.pos != body.len() {
        return Err(WeftError::Integrity("trailing bytes before checksum".into()));
    }
    Ok(Checkpoint { config, params, optimizer })
}

pub fn save<F: Scalar>(
    path: &Path,
    config: &DenoiserConfig,
    params: &DenoiserParams<F>,
    optimizer: Option<&OptimizerState<F>>,
) -> Result<()> {
    fs::write(path, encode(config, params, optimizer))?;
    Ok(())
}

pub fn load<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::optim::opt_step;
    use crate::model::Denoiser;

    fn small() -> Denoiser<f32> {
        let c = DenoiserConfig { d_model: 8, n_heads: 2, ffn_hidden: 8, max_seq_len: 8, ..DenoiserConfig::desk(6, 5, 4) };
        Denoiser::new(c).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let mut p = m.params.clone();
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        let mut g = p.zeros_like();
        g.tok_emb.data[1] = 0.5;
        opt_step(&mut p, &g, &mut st, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &m.config, &p, Some(&st)).unwrap();
        let back = load::<f32>(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, p);
        assert_eq!(back.optimizer.unwrap(), st);
        let a = Denoiser::from_parts(m.config, p);
        let b = Denoiser::from_parts(back.config, back.params);
        let toks = [0, 5, 2, 5];
        let (la, lb) = (a.forward(&toks).unwrap(), b.forward(&toks).unwrap());
        assert!(la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corruption_is_detected() {
        let m = small();
        let bytes = encode(&m.config, &m.params, None);
        assert!(decode::<f32>(&bytes).is_ok());
        assert_eq!(peek_dtype(&bytes).unwrap(), DType::F32);
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 9]), Err(WeftError::Integrity(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode::<f32>(&flipped), Err(WeftError::Integrity(_))));
        assert!(matches!(decode::<f64>(&bytes), Err(WeftError::Integrity(_))));

        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode::<f32>(&v2), Err(WeftError::Version { found: 2, expected: 1 })));
    }
}
