//! Binary checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! magic "GPCKPT\0\0" | version u64 | arch u64 (0 decoder, 1 encoder)
//! vocab_size d_model n_layers n_heads d_ff max_seq_len (u64 each) | dropout f64
//! n_tensors u64 | per tensor: numel u64, numel × f64
//! ```

use std::io::{Read, Write};

use super::{Arch, ModelConfig, ModelError, Params, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GPCKPT\0\0";
pub const CHECKPOINT_VERSION: u64 = 1;

pub fn write_checkpoint<S: Scalar, W: Write>(p: &Params<S>, mut w: W) -> std::io::Result<()> {
    let c = p.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    let arch = match c.arch {
        Arch::DecoderCausal => 0u64,
        Arch::EncoderBidir => 1,
    };
    for v in [
        CHECKPOINT_VERSION,
        arch,
        c.vocab_size as u64,
        c.d_model as u64,
        c.n_layers as u64,
        c.n_heads as u64,
        c.d_ff as u64,
        c.max_seq_len as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&c.dropout.to_le_bytes())?;
    w.write_all(&(p.specs().len() as u64).to_le_bytes())?;
    let mut buf = Vec::new();
    for spec in p.specs() {
        buf.clear();
        buf.extend_from_slice(&(spec.numel() as u64).to_le_bytes());
        for x in &p.as_flat()[spec.range()] {
            buf.extend_from_slice(&x.f64().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| ModelError::Checkpoint("truncated file".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R) -> Result<Params<S>, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ModelError::Checkpoint("truncated file".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u64(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let arch = match read_u64(&mut r)? {
        0 => Arch::DecoderCausal,
        1 => Arch::EncoderBidir,
        a => return Err(ModelError::Checkpoint(format!("unknown arch {a}"))),
    };
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = usize::try_from(read_u64(&mut r)?).map_err(|_| ModelError::Checkpoint("dimension overflow".into()))?;
    }
    let dropout = f64::from_bits(read_u64(&mut r)?);
    let [vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len] = dims;
    let cfg = ModelConfig { arch, vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len, dropout };
    cfg.validate()?;
    let (specs, _) = super::params::layout(&cfg);
    let n_tensors = read_u64(&mut r)?;
    if n_tensors != specs.len() as u64 {
        return Err(ModelError::Checkpoint(format!("expected {} tensors, found {n_tensors}", specs.len())));
    }
    let mut values = Vec::with_capacity(specs.last().map(|s| s.offset + s.numel()).unwrap_or(0));
    let mut b = [0u8; 8];
    for spec in &specs {
        let numel = read_u64(&mut r)?;
        if numel != spec.numel() as u64 {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} has {numel} values, expected {}",
                spec.name,
                spec.numel()
            )));
        }
        for _ in 0..numel {
            r.read_exact(&mut b).map_err(|_| ModelError::Checkpoint("truncated file".into()))?;
            values.push(S::c(f64::from_le_bytes(b)));
        }
    }
    if r.read(&mut b)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Params::from_flat(&cfg, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::Seed;

    #[test]
    fn roundtrip_is_bitwise() {
        let cfg = ModelConfig::tiny(Arch::EncoderBidir, 30);
        let p = Params::<f64>::init(&cfg, Seed(9)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let q: Params<f64> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut again = Vec::new();
        write_checkpoint(&q, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_damage() {
        let p = Params::<f64>::init(&ModelConfig::tiny(Arch::DecoderCausal, 10), Seed(1)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert!(read_checkpoint::<f64, _>(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f64, _>(bad.as_slice()).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint::<f64, _>(extra.as_slice()).is_err());
    }
}
