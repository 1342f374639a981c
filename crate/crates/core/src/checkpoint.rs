//! Binary checkpoints: `SMO1`, segment table, then raw little-endian f64 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Architecture, Model, ParamVector, Role, Segment};

const MAGIC: &[u8; 4] = b"SMO1";

pub fn encode(params: &ParamVector) -> Vec<u8> {
    let segs = params.segments();
    let mut out = Vec::with_capacity(8 + segs.len() * 16 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(segs.len() as u32).to_le_bytes());
    for s in segs {
        out.extend_from_slice(&s.layer.to_le_bytes());
        out.push(s.role.code());
        out.push(s.shape.len() as u8);
        for &d in &s.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::BadCheckpoint(format!("truncated at byte {}", self.at)))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parses a checkpoint into its segment table and flat values.
pub fn decode(bytes: &[u8]) -> Result<(Vec<Segment>, Vec<f64>)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::BadCheckpoint("missing SMO1 magic".into()));
    }
    let count = c.u32()? as usize;
    let mut segments = Vec::with_capacity(count.min(1 << 16));
    let mut offset = 0;
    for _ in 0..count {
        let layer = c.u32()?;
        let role = Role::from_code(c.u8()?).ok_or_else(|| Error::BadCheckpoint("unknown role code".into()))?;
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let seg = Segment { layer, role, shape, offset };
        offset += seg.len();
        segments.push(seg);
    }
    let raw = c.take(offset * 8)?;
    if c.at != bytes.len() {
        return Err(Error::BadCheckpoint(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    let values = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok((segments, values))
}

pub fn save(path: impl AsRef<Path>, params: &ParamVector) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks its segment table against `arch`.
pub fn load(path: impl AsRef<Path>, arch: &Architecture) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (segments, values) = decode(&bytes)?;
    let (expected, groups) = arch.layout();
    if segments != expected {
        return Err(Error::BadCheckpoint("segment table does not match the architecture".into()));
    }
    Model::with_params(arch.clone(), ParamVector::new(values, segments, groups)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_byte_identical() {
        let arch = Architecture::conv_small(1, 6, 3);
        let mut model = Model::new(arch.clone(), &mut Rng::new(3)).unwrap();
        model.params.values_mut()[0] = -0.0;
        model.params.values_mut()[1] = f64::MIN_POSITIVE / 4.0;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.smo");
        save(&p, &model.params).unwrap();
        let loaded = load(&p, &arch).unwrap();
        let a: Vec<u64> = model.params.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = loaded.params.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(encode(&loaded.params), fs::read(&p).unwrap());
    }

    #[test]
    fn header_layout() {
        let arch = Architecture::mlp(&[2, 3]);
        let model = Model::zeros(arch).unwrap();
        let bytes = encode(&model.params);
        assert_eq!(&bytes[..4], b"SMO1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        // layer 0, weight, rank 2, dims [3, 2]
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        assert_eq!(bytes[12], 0);
        assert_eq!(bytes[13], 2);
        assert_eq!(bytes.len(), 8 + (4 + 2 + 8) + (4 + 2 + 4) + 9 * 8);
    }

    #[test]
    fn mismatches_are_rejected() {
        let model = Model::zeros(Architecture::mlp(&[2, 3])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.smo");
        save(&p, &model.params).unwrap();
        assert!(matches!(load(&p, &Architecture::mlp(&[2, 4])), Err(Error::BadCheckpoint(_))));
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }
}
