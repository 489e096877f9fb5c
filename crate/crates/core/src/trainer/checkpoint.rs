//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "MIXACMCK"
//! version    u32      1
//! spec       in_channels u64, classes u64,
//!            stem (channels u64, kernel u64, bias u8), head_bias u8,
//!            block count u64, then per block:
//!            conv_layers u64, channels u64, kernel u64, stride u64, bias u8, residual u8
//! params     table (see below)
//! affine     u8 flag; if 1: side u8 (0 teacher, 1 student) then a table
//! velocity   u64 count, then per entry: u64 length, f64 values
//! step       u64
//! epoch      u64
//! rng        seed [u8; 32], stream u64, word_pos u128
//! ```
//!
//! A table is a u64 entry count followed by, per entry: name length u64,
//! UTF-8 name, rank u64, rank × u64 dims, product(dims) × f64 values.

use std::io::{Cursor, Read};
use std::path::Path;

use crate::acm::TransformSide;
use crate::error::{Error, Result};
use crate::model::{BlockSpec, ModelSpec, ParamStore, StemSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MIXACMCK";
pub const VERSION: u32 = 1;

/// Position of a ChaCha generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub affine: Option<(TransformSide, ParamStore)>,
    pub velocity: Vec<Vec<f64>>,
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn table(&mut self, store: &ParamStore) {
        self.usize(store.len());
        for (name, t) in store.iter() {
            self.usize(name.len());
            self.0.extend_from_slice(name.as_bytes());
            self.usize(t.rank());
            t.shape().iter().for_each(|&d| self.usize(d));
            self.f64s(t.data());
        }
    }
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("bad boolean byte {v}"))),
        }
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    /// A length field, bounded by the bytes that remain.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let v = self.u64()?;
        let remaining = self.0.get_ref().len() as u64 - self.0.position();
        if v.saturating_mul(unit as u64) > remaining {
            return Err(Error::Format(format!("length field {v} exceeds remaining {remaining} bytes")));
        }
        Ok(v as usize)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
    fn table(&mut self) -> Result<ParamStore> {
        let count = self.len(1)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = self.len(1)?;
            let mut name = vec![0u8; name_len];
            self.0.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = self.len(8)?;
            let shape: Vec<usize> = (0..rank).map(|_| self.len(1)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data = self.f64s(n)?;
            store.push(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        let s = &self.spec;
        w.usize(s.in_channels);
        w.usize(s.classes);
        w.usize(s.stem.channels);
        w.usize(s.stem.kernel_size);
        w.u8(s.stem.use_bias as u8);
        w.u8(s.head_bias as u8);
        w.usize(s.blocks.len());
        for b in &s.blocks {
            w.usize(b.conv_layers);
            w.usize(b.channels);
            w.usize(b.kernel_size);
            w.usize(b.stride);
            w.u8(b.use_bias as u8);
            w.u8(b.use_residual as u8);
        }
        w.table(&self.params);
        match &self.affine {
            None => w.u8(0),
            Some((side, store)) => {
                w.u8(1);
                w.u8(match side {
                    TransformSide::Teacher => 0,
                    TransformSide::Student => 1,
                });
                w.table(store);
            }
        }
        w.usize(self.velocity.len());
        for v in &self.velocity {
            w.usize(v.len());
            w.f64s(v);
        }
        w.u64(self.step);
        w.u64(self.epoch);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(Cursor::new(bytes));
        if &r.bytes::<8>()? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.bytes()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let in_channels = r.u64()? as usize;
        let classes = r.u64()? as usize;
        let stem = StemSpec {
            channels: r.u64()? as usize,
            kernel_size: r.u64()? as usize,
            use_bias: r.flag()?,
        };
        let head_bias = r.flag()?;
        let n_blocks = r.len(34)?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            blocks.push(BlockSpec {
                conv_layers: r.u64()? as usize,
                channels: r.u64()? as usize,
                kernel_size: r.u64()? as usize,
                stride: r.u64()? as usize,
                use_bias: r.flag()?,
                use_residual: r.flag()?,
            });
        }
        let spec = ModelSpec {
            in_channels,
            classes,
            stem,
            blocks,
            head_bias,
        };
        let params = r.table()?;
        let affine = if r.flag()? {
            let side = match r.u8()? {
                0 => TransformSide::Teacher,
                1 => TransformSide::Student,
                v => return Err(Error::Format(format!("bad transform side {v}"))),
            };
            Some((side, r.table()?))
        } else {
            None
        };
        let n_vel = r.len(8)?;
        let mut velocity = Vec::with_capacity(n_vel);
        for _ in 0..n_vel {
            let n = r.len(8)?;
            velocity.push(r.f64s(n)?);
        }
        let step = r.u64()?;
        let epoch = r.u64()?;
        let seed = r.bytes::<32>()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.bytes()?);
        if (r.0.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            spec,
            params,
            affine,
            velocity,
            step,
            epoch,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockCnn;

    fn sample() -> Checkpoint {
        let spec = ModelSpec::from_channels(1, 3, &[2, 3], 1, true, true).unwrap();
        let m = BlockCnn::new(spec.clone(), 4).unwrap();
        let mut affine = ParamStore::new();
        affine.push("tap1.weight", Tensor::full(&[2, 2], 0.5));
        Checkpoint {
            spec,
            params: m.params().clone(),
            affine: Some((TransformSide::Student, affine)),
            velocity: m.params().tensors().iter().map(|t| t.data().iter().map(|v| v * 0.1).collect()).collect(),
            step: 17,
            epoch: 2,
            rng: RngState {
                seed: [7; 32],
                stream: 1,
                word_pos: 12345,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(Checkpoint::from_bytes(truncated).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
