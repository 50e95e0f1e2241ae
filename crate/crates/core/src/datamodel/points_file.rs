//! Sidecar binary point files: a 16-byte header followed by float32 rows of
//! `x y z r g b`, little-endian.

use std::path::Path;

use super::Point;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TAPT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_points(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + points.len() * 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for v in p.xyz.iter().chain(&p.rgb) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_points(bytes: &[u8], path: &Path) -> Result<Vec<Point>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::corrupt(path, "missing point-file header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if Some(body.len()) != count.checked_mul(24) {
        return Err(Error::corrupt(
            path,
            format!("expected {count} rows, body has {} bytes", body.len()),
        ));
    }
    Ok(body
        .chunks_exact(24)
        .map(|row| {
            let f = |k: usize| f32::from_le_bytes(row[4 * k..4 * k + 4].try_into().unwrap());
            Point {
                xyz: [f(0), f(1), f(2)],
                rgb: [f(3), f(4), f(5)],
            }
        })
        .collect())
}

pub fn write_points_file(path: impl AsRef<Path>, points: &[Point]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_points(points)).map_err(|e| Error::io(path, e))
}

pub fn read_points_file(path: impl AsRef<Path>) -> Result<Vec<Point>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_points(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_file_is_corrupt() {
        let pts = vec![Point::new([1.0, 2.0, 3.0], [0.1, 0.2, 0.3]); 3];
        let bytes = encode_points(&pts);
        assert_eq!(decode_points(&bytes, Path::new("x")).unwrap(), pts);
        assert!(matches!(
            decode_points(&bytes[..bytes.len() - 1], Path::new("x")),
            Err(Error::Corrupt { .. })
        ));
    }
}
