//! Binary checkpoint format. All integers are little-endian `u32` unless
//! noted.
//!
//! ```text
//! magic        4 bytes  "RSVM"
//! version      u32      = 1
//! depths       u32 × 4
//! dims         u32 × 4
//! state        u32
//! expansion    u32
//! conv_kernel  u32
//! num_classes  u32
//! variant      u8       0 = plain, 1 = global residual
//! input H, W   u32 × 2
//! count        u32      number of tensors
//! per tensor, in model registration order:
//!   name_len u32, name (UTF-8), rank u32, extents u32 × rank,
//!   data f32 × product(extents)
//! ```
//!
//! Saving then loading reproduces every weight bit for bit.

use std::fs;
use std::path::Path;

use crate::error::Error;
use crate::model::{Model, ModelConfig, Variant, STAGES};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RSVM";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(64 + 4 * model.num_params());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    for &v in c.depths.iter().chain(&c.dims) {
        put_u32(&mut out, v);
    }
    for v in [c.state, c.expansion, c.conv_kernel, c.num_classes] {
        put_u32(&mut out, v);
    }
    out.push(match c.variant {
        Variant::Plain => 0,
        Variant::GlobalResidual => 1,
    });
    put_u32(&mut out, c.input_size.0);
    put_u32(&mut out, c.input_size.1);
    let params = model.params().params();
    put_u32(&mut out, params.len());
    for p in params {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], Error> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, Error> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model<f32>, Error> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let mut depths = [0; STAGES];
    let mut dims = [0; STAGES];
    for v in depths.iter_mut().chain(dims.iter_mut()) {
        *v = r.u32()?;
    }
    let (state, expansion, conv_kernel, num_classes) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let variant = match r.take(1)?[0] {
        0 => Variant::Plain,
        1 => Variant::GlobalResidual,
        other => return Err(Error::format(path, format!("unknown variant tag {other}"))),
    };
    let input_size = (r.u32()?, r.u32()?);
    let config = ModelConfig {
        depths,
        dims,
        state,
        expansion,
        conv_kernel,
        num_classes,
        variant,
        input_size,
    };
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel =
            numel.ok_or_else(|| Error::format(path, format!("{name}: extents overflow")))?;
        let raw = r.take(numel.saturating_mul(4))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::from_vec(shape, data)
            .map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        if store.find(&name).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
        store.add(name, value, true);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Model::from_params(config, store)
}

/// Writes through a sibling temp file so a crash never leaves a torn
/// checkpoint behind.
pub fn save(model: &Model<f32>, path: &Path) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let model = Model::<f32>::new(ModelConfig::micro(5, Variant::GlobalResidual), 3).unwrap();
        let bytes = encode(&model);
        assert_eq!(&bytes[..4], b"RSVM");
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.config(), model.config());
        for (a, b) in back.params().params().iter().zip(model.params().params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.decay, b.decay);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_reported() {
        let model = Model::<f32>::new(ModelConfig::micro(2, Variant::Plain), 0).unwrap();
        let bytes = encode(&model);
        let p = Path::new("x.rsvm");
        assert!(matches!(decode(b"NOPE", p), Err(Error::Format { .. })));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3], p),
            Err(Error::Format { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra, p), Err(Error::Format { .. })));
        // num_classes field sits after magic, version, 8 stage ints and 3 more.
        let mut wrong = bytes;
        wrong[4 + 4 + 32 + 12..4 + 4 + 32 + 16].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode(&wrong, p),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
