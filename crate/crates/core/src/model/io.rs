//! Little-endian weight file:
//!
//! ```text
//! "EMTW" | version u32
//! | n_layers u32 | n_heads u32 | head_dim u32 | vocab_size u32 | max_train_len u32
//! | position_encoding u8 | 3 reserved bytes | ffn_mult f32 | rope_base f32 | alibi_max_bias f32
//! | n_tensors u32
//! | per tensor: name_len u32 | name (utf-8) | ndim u32 | dims u32[ndim] | data f32[prod(dims)]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::{ModelConfig, PositionEncoding};
use super::weights::{tensor_layout, Weights};
use crate::error::{Error, Result};
use crate::memory::{read_f32s, read_u32, to_u32, write_f32s, write_u32};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"EMTW";
pub const WEIGHTS_VERSION: u32 = 1;

impl Weights {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Weights> {
        Weights::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.check_shapes()?;
        let c = &self.config;
        w.write_all(WEIGHTS_MAGIC)?;
        write_u32(w, WEIGHTS_VERSION)?;
        for (v, name) in [
            (c.n_layers, "n_layers"),
            (c.n_heads, "n_heads"),
            (c.head_dim, "head_dim"),
            (c.vocab_size, "vocab_size"),
            (c.max_train_len, "max_train_len"),
        ] {
            write_u32(w, to_u32(v, name)?)?;
        }
        w.write_all(&[c.position_encoding.to_u8(), 0, 0, 0])?;
        write_f32s(w, &[c.ffn_mult, c.rope_base, c.alibi_max_bias])?;

        let layout = tensor_layout(c);
        write_u32(w, to_u32(layout.len(), "tensor count")?)?;
        for ((name, shape), data) in layout.iter().zip(self.slices()) {
            write_u32(w, to_u32(name.len(), "name length")?)?;
            w.write_all(name.as_bytes())?;
            write_u32(w, to_u32(shape.len(), "ndim")?)?;
            for &dim in shape {
                write_u32(w, to_u32(dim, "dim")?)?;
            }
            write_f32s(w, data)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Weights> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format(format!("bad weights magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != WEIGHTS_VERSION {
            return Err(Error::UnsupportedVersion { found: version, expected: WEIGHTS_VERSION });
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let mut enc = [0u8; 4];
        r.read_exact(&mut enc)?;
        let position_encoding = PositionEncoding::from_u8(enc[0])
            .ok_or_else(|| Error::Format(format!("unknown position encoding {}", enc[0])))?;
        let floats = read_f32s(r, 3)?;
        let config = ModelConfig {
            n_layers: dims[0],
            n_heads: dims[1],
            head_dim: dims[2],
            vocab_size: dims[3],
            max_train_len: dims[4],
            position_encoding,
            ffn_mult: floats[0],
            rope_base: floats[1],
            alibi_max_bias: floats[2],
        };
        config.validate().map_err(|e| Error::Format(format!("stored config is invalid: {e}")))?;

        let layout = tensor_layout(&config);
        let n_tensors = read_u32(r)? as usize;
        if n_tensors != layout.len() {
            return Err(Error::Format(format!("{n_tensors} tensors stored, config implies {}", layout.len())));
        }
        let mut weights = Weights::<f32>::zeros(&config)?;
        for ((name, shape), dst) in layout.iter().zip(weights.slices_mut()) {
            let name_len = read_u32(r)? as usize;
            if name_len > 4096 {
                return Err(Error::Format(format!("tensor name of {name_len} bytes")));
            }
            let mut raw = vec![0u8; name_len];
            r.read_exact(&mut raw)?;
            let stored = String::from_utf8(raw).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            if &stored != name {
                return Err(Error::Format(format!("expected tensor {name}, found {stored}")));
            }
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(Error::Format(format!("{name} claims {ndim} dimensions")));
            }
            let stored_shape = (0..ndim).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if &stored_shape != shape {
                return Err(Error::Format(format!("{name} has shape {stored_shape:?}, config implies {shape:?}")));
            }
            dst.copy_from_slice(&read_f32s(r, dst.len())?);
        }
        Ok(weights)
    }
}
