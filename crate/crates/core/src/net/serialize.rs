//! `LIDIAMDL` model container.
//!
//! ```text
//! magic "LIDIAMDL" | version u32 | tensor count u32 |
//! per tensor: name length u16, UTF-8 name, rank u8, dims u32 x rank, f32 x len
//! ```
//!
//! Integers and floats are little-endian. The first tensor, `__arch__`,
//! holds the architecture descriptor; parameters and batch-norm buffers
//! follow in [`ModelParams::visit_all`] order.

use std::path::Path;

use super::{ArchDescriptor, ModelParams, NetError, Variant};
use crate::image_io::write_atomic;
use crate::nn::Tensor;
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"LIDIAMDL";
pub const FORMAT_VERSION: u32 = 1;
const ARCH_ENTRY: &str = "__arch__";

fn arch_values(a: &ArchDescriptor) -> Vec<f32> {
    [
        match a.variant {
            Variant::Full => 0,
            Variant::Small => 1,
        },
        a.patch_side,
        a.channels,
        a.k,
        a.feature_dim,
        a.window,
        a.share_weight_net as usize,
    ]
    .iter()
    .map(|&v| v as f32)
    .collect()
}

fn arch_from_values(v: &[f32]) -> Result<ArchDescriptor, NetError> {
    let bad = || NetError::Arch(format!("descriptor entry {v:?}"));
    if v.len() != 7 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(bad());
    }
    let u = |i: usize| v[i] as usize;
    let arch = ArchDescriptor {
        variant: match u(0) {
            0 => Variant::Full,
            1 => Variant::Small,
            _ => return Err(bad()),
        },
        patch_side: u(1),
        channels: u(2),
        k: u(3),
        feature_dim: u(4),
        window: u(5),
        share_weight_net: match u(6) {
            0 => false,
            1 => true,
            _ => return Err(bad()),
        },
    };
    arch.validate().map_err(NetError::Arch)?;
    Ok(arch)
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Model bytes; values are stored as `f32`.
pub fn encode_model<T: Real>(model: &ModelParams<T>) -> Vec<u8> {
    let mut count = 1u32;
    model.visit_all(&mut |_, _| count += 1);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    let arch = arch_values(&model.arch);
    put_tensor(&mut out, ARCH_ENTRY, &[arch.len()], arch.into_iter());
    model.visit_all(&mut |name, t| {
        put_tensor(&mut out, name, &t.dims, t.data.iter().map(|v| v.f64() as f32));
    });
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8], NetError> {
        if self.bytes.len() - self.pos < len {
            return Err(NetError::Truncated { offset: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>), NetError> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let at = self.pos;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| NetError::Arch(format!("tensor name at byte {at} is not UTF-8")))?;
        let rank = self.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count: usize = dims.iter().product();
        let raw = self.take(count.checked_mul(4).ok_or(NetError::Truncated { offset: self.pos })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, dims, data))
    }
}

/// Parses and validates every tensor name and shape against the stored descriptor.
pub fn decode_model<T: Real>(bytes: &[u8]) -> Result<ModelParams<T>, NetError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(NetError::Magic);
    }
    r.pos = MAGIC.len();
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(NetError::Version(version));
    }
    let count = r.u32()? as usize;
    let (name, _, values) = r.tensor()?;
    if name != ARCH_ENTRY {
        return Err(NetError::TensorName {
            index: 0,
            expected: ARCH_ENTRY.into(),
            found: name,
        });
    }
    let arch = arch_from_values(&values)?;
    let mut model = ModelParams::<T>::init(arch, 0);
    let mut expected = Vec::new();
    model.visit_all(&mut |name, t| expected.push((name.to_string(), t.dims.clone())));
    if count != expected.len() + 1 {
        return Err(NetError::TensorCount {
            expected: expected.len() + 1,
            found: count,
        });
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for (i, (want, want_dims)) in expected.iter().enumerate() {
        let (name, dims, data) = r.tensor()?;
        if &name != want {
            return Err(NetError::TensorName {
                index: i + 1,
                expected: want.clone(),
                found: name,
            });
        }
        if &dims != want_dims {
            return Err(NetError::TensorShape {
                name,
                expected: want_dims.clone(),
                found: dims,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite(name));
        }
        loaded.push(data);
    }
    if r.pos != bytes.len() {
        return Err(NetError::TensorCount {
            expected: expected.len() + 1,
            found: count + 1,
        });
    }
    let mut i = 0;
    model.visit_all_mut(&mut |_, t: &mut Tensor<T>| {
        t.data = loaded[i].iter().map(|&v| T::of(v as f64)).collect();
        i += 1;
    });
    Ok(model)
}

/// Writes the model atomically (temporary file, then rename).
pub fn save_model<T: Real>(model: &ModelParams<T>, path: &Path) -> Result<(), NetError> {
    Ok(write_atomic(path, &encode_model(model))?)
}

pub fn load_model<T: Real>(path: &Path) -> Result<ModelParams<T>, NetError> {
    decode_model(&std::fs::read(path)?)
}
