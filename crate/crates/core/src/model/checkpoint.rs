//! Binary checkpoints: magic, version, JSON layout descriptor, then the
//! parameters as little-endian `f64`.

use std::io::{Read, Write};

use super::{ModelLayout, ParameterVector};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParameterVector) -> Result<()> {
    let layout = serde_json::to_vec(&params.layout)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(layout.len() as u32).to_le_bytes())?;
    w.write_all(&layout)?;
    w.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParameterVector> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut b4)?;
    let mut layout = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut layout)?;
    let layout: ModelLayout = serde_json::from_slice(&layout)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    if n != layout.dim() {
        return Err(Error::Dimension { expected: layout.dim(), actual: n });
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    ParameterVector::from_values(layout, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Segment;

    #[test]
    fn round_trip_is_bit_exact() {
        let layout = ModelLayout {
            n_tokens: 3,
            n_key_slots: 2,
            visual_dim: 2,
            embed_dim: 2,
            hidden_dim: 2,
            n_answers: 3,
            frozen: vec![Segment::KeyEmbedding],
        };
        let values: Vec<f64> = (0..layout.dim()).map(|i| (i as f64).sin() * 1e-3 - 0.0).collect();
        let p = ParameterVector::from_values(layout, values).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.layout, p.layout);
        assert!(back.values.iter().zip(&p.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(read_checkpoint(&b"NOTACKPTxxxxxxxx"[..]).is_err());
    }
}
