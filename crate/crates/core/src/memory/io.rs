//! Little-endian bank file:
//!
//! ```text
//! "EMTB" | version u32 | n_layers u32 | n_heads u32 | head_dim u32 | n_tokens u64
//! | rotation_state u8 | 7 reserved bytes
//! | keys f32 [layer][head][token][d] | values f32 (same layout)
//! | token_ids u32 [n_tokens] | original positions u32 [n_tokens]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::bank::{MemoryBank, RotationState, Slot};
use crate::error::{ensure_finite, Error, Result};
use crate::scalar::norm;

pub const BANK_MAGIC: &[u8; 4] = b"EMTB";
pub const BANK_VERSION: u32 = 1;

impl MemoryBank {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MemoryBank> {
        let mut r = BufReader::new(File::open(path)?);
        MemoryBank::read_from(&mut r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if !self.is_complete() {
            return Err(Error::Contract("cannot save a partially filled bank".into()));
        }
        w.write_all(BANK_MAGIC)?;
        write_u32(w, BANK_VERSION)?;
        write_u32(w, to_u32(self.n_layers(), "n_layers")?)?;
        write_u32(w, to_u32(self.n_heads(), "n_heads")?)?;
        write_u32(w, to_u32(self.head_dim(), "head_dim")?)?;
        w.write_all(&(self.n_tokens() as u64).to_le_bytes())?;
        w.write_all(&[self.rotation_state() as u8])?;
        w.write_all(&[0u8; 7])?;
        for slot in &self.slots {
            write_f32s(w, &slot.keys)?;
        }
        for slot in &self.slots {
            write_f32s(w, &slot.values)?;
        }
        for &id in self.token_ids() {
            write_u32(w, id)?;
        }
        for &pos in self.original_positions() {
            write_u32(w, pos)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<MemoryBank> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format(format!("bad bank magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != BANK_VERSION {
            return Err(Error::UnsupportedVersion { found: version, expected: BANK_VERSION });
        }
        let n_layers = read_u32(r)? as usize;
        let n_heads = read_u32(r)? as usize;
        let head_dim = read_u32(r)? as usize;
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let n_tokens =
            usize::try_from(u64::from_le_bytes(buf8)).map_err(|_| Error::Format("token count overflows".into()))?;
        let mut tail = [0u8; 8];
        r.read_exact(&mut tail)?;
        let rotation = RotationState::from_u8(tail[0])
            .ok_or_else(|| Error::Format(format!("unknown rotation state {}", tail[0])))?;
        if head_dim == 0 {
            return Err(Error::Format("head_dim must be non-zero".into()));
        }

        let per_slot = n_tokens.checked_mul(head_dim).ok_or_else(|| Error::Format("bank size overflows".into()))?;
        let n_slots = n_layers * n_heads;
        let mut keys = Vec::with_capacity(n_slots);
        for _ in 0..n_slots {
            keys.push(read_f32s(r, per_slot)?);
        }
        let mut slots = Vec::with_capacity(n_slots);
        for k in keys {
            let values = read_f32s(r, per_slot)?;
            ensure_finite(&k, "stored keys")?;
            ensure_finite(&values, "stored values")?;
            let key_norms = k.chunks_exact(head_dim).map(norm).collect();
            slots.push(Slot { keys: k, values, key_norms });
        }
        let token_ids = read_u32s(r, n_tokens)?;
        let original_positions = read_u32s(r, n_tokens)?;
        Ok(MemoryBank::from_parts(n_layers, n_heads, head_dim, rotation, slots, token_ids, original_positions))
    }
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit in u32")))
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_f32s(w: &mut impl Write, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn read_u32s(r: &mut impl Read, n: usize) -> Result<Vec<u32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;
    use std::io::Cursor;

    fn random_bank(seed: u64) -> MemoryBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layers, heads, d, t) = (2, 3, 4, 9);
        let mut bank = MemoryBank::new(layers, heads, d, RotationState::Unrotated);
        let ids: Vec<u32> = (0..t).map(|_| rng.random_range(0..50)).collect();
        for l in 0..layers {
            for h in 0..heads {
                let k = Array2::from_shape_fn((t, d), |_| rng.random_range(-3.0f32..3.0));
                let v = Array2::from_shape_fn((t, d), |_| rng.random_range(-3.0f32..3.0));
                bank.insert(l, h, k.view(), v.view(), &ids).unwrap();
            }
        }
        bank
    }

    fn encode(bank: &MemoryBank) -> Vec<u8> {
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_exact() {
        let bank = random_bank(1);
        let decoded = MemoryBank::read_from(&mut Cursor::new(encode(&bank))).unwrap();
        assert_eq!(decoded, bank);
    }

    #[test]
    fn round_trip_keeps_pruning_remap() {
        let bank = random_bank(2);
        let special: BTreeSet<u32> = bank.token_ids()[..3].iter().copied().collect();
        let pruned = bank.prune_special_tokens(&special).unwrap();
        let decoded = MemoryBank::read_from(&mut Cursor::new(encode(&pruned))).unwrap();
        assert_eq!(decoded.original_positions(), pruned.original_positions());
        assert_eq!(decoded, pruned);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&random_bank(3));
        assert_eq!(&bytes[..4], b"EMTB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 9);
        assert_eq!(bytes[28], 0);
        assert_eq!(bytes.len(), 36 + 2 * 2 * 3 * 9 * 4 * 4 + 2 * 9 * 4);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode(&random_bank(4));
        bytes[0] = b'X';
        assert!(matches!(MemoryBank::read_from(&mut Cursor::new(bytes)), Err(Error::Format(_))));
    }

    #[test]
    fn newer_version_is_rejected() {
        let mut bytes = encode(&random_bank(5));
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            MemoryBank::read_from(&mut Cursor::new(bytes)),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncated_file_is_io_error() {
        let bytes = encode(&random_bank(6));
        let cut = bytes[..bytes.len() - 5].to_vec();
        assert!(matches!(MemoryBank::read_from(&mut Cursor::new(cut)), Err(Error::Io(_))));
    }
}
