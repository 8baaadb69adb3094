//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian): magic `LFCN`, version `u32 = 1`,
//! layer count `u32`, then per layer: name length `u16`, name bytes, kernel
//! rank `u8`, kernel dims `u32` each, kernel values as `f32`, then the bias
//! values as `f32` (one per output channel).

use std::fs;
use std::path::Path;

use super::network::{LayerParams, NetworkSpec, Parameters};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LFCN";
const VERSION: u32 = 1;

pub fn encode<T: Scalar>(params: &Parameters<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        out.extend_from_slice(&(l.name.len() as u16).to_le_bytes());
        out.extend_from_slice(l.name.as_bytes());
        out.push(l.kernel.shape().len() as u8);
        for d in l.kernel.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in l.kernel.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect())
    }
}

/// Parses a checkpoint and validates it against `spec`. Nothing is returned
/// unless the whole buffer parses and matches.
pub fn decode<T: Scalar>(bytes: &[u8], spec: &NetworkSpec) -> Result<Parameters<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not an LFCN checkpoint)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let expected: Vec<_> = spec.parametric().collect();
    let mut layers = Vec::with_capacity(count.min(expected.len()));
    for i in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("layer {i}: name is not UTF-8")))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let Some(layer) = expected.get(i) else {
            return Err(Error::Checkpoint(format!(
                "layer `{name}`: checkpoint has {count} layers, network has {}",
                expected.len()
            )));
        };
        let (kshape, bias_len) = layer.param_shapes().expect("parametric layer");
        if name != layer.name || dims != kshape {
            return Err(Error::Checkpoint(format!(
                "layer `{}`: checkpoint holds `{name}` with kernel {dims:?}, expected {kshape:?}",
                layer.name
            )));
        }
        let n: usize = dims.iter().product();
        let kernel = Tensor::from_vec(dims, r.f32s(n)?)?;
        let bias = Tensor::from_vec(vec![bias_len], r.f32s(bias_len)?)?;
        layers.push(LayerParams { name, kernel, bias });
    }
    if count < expected.len() {
        return Err(Error::Checkpoint(format!(
            "layer `{}`: missing from checkpoint",
            expected[count].name
        )));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Parameters { layers })
}

pub fn save<T: Scalar>(params: &Parameters<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path, spec: &NetworkSpec) -> Result<Parameters<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::network::NetworkConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(c: [usize; 3]) -> NetworkSpec {
        NetworkSpec::fcn(&NetworkConfig::with_channels(c)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = spec([4, 8, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Parameters::<f32>::init(&s, 2.0, &mut rng);
        p.layers[3].bias.data_mut()[1] = -0.125;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.lfcn");
        save(&p, &path).unwrap();
        let q: Parameters<f32> = load(&path, &s).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn header_layout() {
        let s = spec([4, 8, 16]);
        let bytes = encode(&Parameters::<f32>::zeros(&s));
        assert_eq!(&bytes[..4], b"LFCN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 5);
        assert_eq!(&bytes[14..19], b"conv1");
        assert_eq!(bytes[19], 4);
    }

    #[test]
    fn truncated_file_rejected() {
        let s = spec([4, 8, 16]);
        let bytes = encode(&Parameters::<f32>::zeros(&s));
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(decode::<f32>(&bytes[..cut], &s), Err(Error::Checkpoint(_))));
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let s = spec([4, 8, 16]);
        let mut bytes = encode(&Parameters::<f32>::zeros(&s));
        bytes[0] = b'X';
        assert!(decode::<f32>(&bytes, &s).is_err());
        bytes[0] = b'L';
        bytes[4] = 2;
        let err = decode::<f32>(&bytes, &s).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn mismatched_spec_names_first_layer() {
        let bytes = encode(&Parameters::<f32>::zeros(&spec([4, 8, 16])));
        let err = decode::<f32>(&bytes, &spec([4, 8, 12])).unwrap_err().to_string();
        assert!(err.contains("`conv3`"), "{err}");
    }
}
