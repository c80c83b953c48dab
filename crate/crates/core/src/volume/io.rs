//! SRV1 volume files.
//!
//! Layout, all little-endian, no padding:
//!
//! ```text
//! 0..4    b"SRV1"
//! 4..16   u32 nx, ny, nz
//! 16..28  f32 spacing_x, spacing_y, spacing_z (mm)
//! 28..    nx*ny*nz f32 voxels, x-fastest, then y, then z
//! ```

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Volume3D;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const SRV1_MAGIC: [u8; 4] = *b"SRV1";
const HEADER_LEN: usize = 28;

pub fn encode_volume<T: Real>(v: &Volume3D<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    buf.extend_from_slice(&SRV1_MAGIC);
    for d in v.dims() {
        buf.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for s in v.spacing() {
        buf.write_f32::<LittleEndian>(s as f32).unwrap();
    }
    for x in v.data() {
        buf.write_f32::<LittleEndian>(x.as_f64() as f32).unwrap();
    }
    buf
}

pub fn decode_volume<T: Real>(bytes: &[u8]) -> Result<Volume3D<T>> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != SRV1_MAGIC {
            return Err(bad_magic(bytes));
        }
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[..4] != SRV1_MAGIC {
        return Err(bad_magic(bytes));
    }
    let mut rd = Cursor::new(&bytes[4..HEADER_LEN]);
    let mut dims = [0u32; 3];
    for d in &mut dims {
        *d = rd.read_u32::<LittleEndian>().unwrap();
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        *s = rd.read_f32::<LittleEndian>().unwrap() as f64;
    }
    if dims.contains(&0) {
        return Err(Error::ZeroDimension(dims));
    }
    let count = dims.iter().map(|&d| d as usize).product::<usize>();
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes(bytes.len() - expected));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Volume3D::new(dims.map(|d| d as usize), spacing, data)
}

fn bad_magic(bytes: &[u8]) -> Error {
    Error::BadMagic {
        expected: SRV1_MAGIC,
        found: [bytes[0], bytes[1], bytes[2], bytes[3]],
    }
}

pub fn read_volume<T: Real>(path: impl AsRef<Path>) -> Result<Volume3D<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_volume(&bytes)
}

pub fn write_volume<T: Real>(v: &Volume3D<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header(magic: &[u8; 4], dims: [u32; 3]) -> Vec<u8> {
        let mut b = magic.to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        for s in [1.0f32, 1.0, 1.0] {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = Volume3D::<f32>::from_fn([3, 5, 7], [0.8, 1.6, 2.4], |_, _, _| rng.random()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.srv");
        write_volume(&v, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 28 + 4 * 105);
        let back: Volume3D<f32> = read_volume(&path).unwrap();
        assert_eq!(back.dims(), v.dims());
        for (a, b) in back.data().iter().zip(v.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in back.spacing().iter().zip(v.spacing()) {
            assert_eq!((*a as f32).to_bits(), (b as f32).to_bits());
        }
        assert_eq!(encode_volume(&back), bytes);
    }

    #[test]
    fn layout_is_little_endian_x_fastest() {
        let v = Volume3D::<f64>::from_fn([2, 1, 2], [1.0, 2.0, 3.0], |i, _, k| (i + 2 * k) as f64).unwrap();
        let b = encode_volume(&v);
        assert_eq!(&b[..4], b"SRV1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[20..24], &2.0f32.to_le_bytes());
        let voxels: Vec<f32> = b[28..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(voxels, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut b = header(b"XXXX", [1, 1, 1]);
        b.extend_from_slice(&0f32.to_le_bytes());
        assert!(matches!(decode_volume::<f32>(&b), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut b = header(b"SRV1", [2, 2, 2]);
        for _ in 0..7 {
            b.extend_from_slice(&1f32.to_le_bytes());
        }
        assert!(matches!(
            decode_volume::<f32>(&b),
            Err(Error::Truncated { expected: 60, found: 56 })
        ));
        assert!(matches!(decode_volume::<f32>(&b[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn zero_dimension_and_trailing_bytes_rejected() {
        let b = header(b"SRV1", [2, 0, 2]);
        assert!(matches!(decode_volume::<f32>(&b), Err(Error::ZeroDimension(_))));
        let mut b = header(b"SRV1", [1, 1, 1]);
        b.extend_from_slice(&[0u8; 5]);
        assert!(matches!(decode_volume::<f32>(&b), Err(Error::TrailingBytes(1))));
    }
}
