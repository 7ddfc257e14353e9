//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "KFREECKP"
//! version    u32
//! n_features u64, hidden u64, heads u64, readout_hidden u64, k_max u64
//! negative_slope f64
//! count      u32                      number of tensors
//! repeated:
//!   name_len u32, name (UTF-8)
//!   rows u64, cols u64
//!   rows*cols f64 values, row-major
//! ```
//!
//! Tensors appear in [`ModelParameters::named_tensors`] order and are checked
//! by name and shape on load, so values round-trip bit for bit.

use super::{DagModel, ModelConfig, ModelParameters};
use crate::autodiff::Mat;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KFREECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

impl DagModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.n_features, c.hidden, c.heads, c.readout_hidden, c.k_max] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.negative_slope.to_bits().to_le_bytes());

        let tensors = self.params.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, m) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = ModelConfig {
            n_features: r.usize()?,
            hidden: r.usize()?,
            heads: r.usize()?,
            readout_hidden: r.usize()?,
            k_max: r.usize()?,
            negative_slope: r.f64()?,
        };
        config.validate()?;
        // Shapes and names come from a freshly built skeleton.
        let mut params = ModelParameters::init(&config, &mut crate::seeded_rng(0))?;
        let expected: Vec<(String, (usize, usize))> = params
            .named_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.dim()))
            .collect();

        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for (want_name, want_shape) in expected {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != want_name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {want_name}, found {name}"
                )));
            }
            let shape = (r.usize()?, r.usize()?);
            if shape != want_shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {shape:?}, expected {want_shape:?}"
                )));
            }
            let mut data = Vec::with_capacity(shape.0 * shape.1);
            for _ in 0..shape.0 * shape.1 {
                data.push(r.f64()?);
            }
            values.push(Mat::from_shape_vec(shape, data).expect("length matches shape"));
        }
        if !r.buf.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        params.set_tensors(values)?;
        Ok(Self { config, params })
    }
}
