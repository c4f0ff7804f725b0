//! IDX container parsing (the format MNIST ships in). Integers are
//! big-endian; image pixels are unsigned bytes scaled to `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `[n, rows, cols]`, values in `[0, 1]`.
    Images(Tensor),
    Labels(Vec<usize>),
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Length {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxData> {
    let magic = be_u32(bytes, 0, path)?;
    let (header, dims) = match magic {
        IMAGES_MAGIC => (16, vec![be_u32(bytes, 4, path)?, be_u32(bytes, 8, path)?, be_u32(bytes, 12, path)?]),
        LABELS_MAGIC => (8, vec![be_u32(bytes, 4, path)?]),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unexpected magic 0x{other:08x}"),
            })
        }
    };
    let count: usize = dims.iter().map(|&d| d as usize).product();
    let expected = header + count;
    if bytes.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[header..];
    if magic == LABELS_MAGIC {
        return Ok(IdxData::Labels(payload.iter().map(|&b| b as usize).collect()));
    }
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    if shape.contains(&0) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("empty image block {shape:?}"),
        });
    }
    let pixels = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(IdxData::Images(Tensor::from_parts(shape, pixels)))
}

pub fn load_idx(path: &Path) -> Result<IdxData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }

    #[test]
    fn minimal_image_file() {
        let mut bytes = header(IMAGES_MAGIC, &[1, 28, 28]);
        bytes.extend(std::iter::repeat_n(0u8, 784));
        match parse_idx(&bytes, Path::new("x")).unwrap() {
            IdxData::Images(t) => {
                assert_eq!(t.shape(), [1, 28, 28]);
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pixels_are_scaled() {
        let mut bytes = header(IMAGES_MAGIC, &[1, 1, 2]);
        bytes.extend([255u8, 51]);
        let IdxData::Images(t) = parse_idx(&bytes, Path::new("x")).unwrap() else { panic!() };
        assert_eq!(t.data(), [1.0, 0.2]);
    }

    #[test]
    fn label_file() {
        let mut bytes = header(LABELS_MAGIC, &[3]);
        bytes.extend([7u8, 2, 1]);
        assert_eq!(parse_idx(&bytes, Path::new("x")).unwrap(), IdxData::Labels(vec![7, 2, 1]));
    }

    #[test]
    fn wrong_magic_names_it() {
        let bytes = header(0x0000_0802, &[1]);
        let err = parse_idx(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("0x00000802"), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = header(LABELS_MAGIC, &[5]);
        bytes.extend([1u8, 2]);
        assert!(matches!(parse_idx(&bytes, Path::new("x")), Err(Error::Length { expected: 13, found: 10, .. })));
        assert!(matches!(parse_idx(&[0, 0], Path::new("x")), Err(Error::Length { .. })));
    }
}
