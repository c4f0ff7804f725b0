//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "GASLNET\0"
//! version      u32       currently 1
//! grouping     u8        0 = structured, 1 = unstructured
//! dense_group  u8        0 = outgoing, 1 = incoming
//! input_rank   u32, then input_rank × u32 extents
//! layer_count  u32, then per layer: kind u8 + 5 × u32 fields
//!              dense   (inputs, outputs, 0, 0, 0)
//!              conv2d  (in_ch, out_ch, kernel, stride, pad)
//!              maxpool (size, stride, 0, 0, 0)
//!              relu = 3, flatten = 4, softmax = 5 (fields zero)
//! tensors      for every dense/conv layer in order: weight then bias,
//!              each as u64 element count followed by f64 values
//! ```
//!
//! Shapes are implied by the layer list and checked against the counts.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::grouping::{DenseGrouping, GroupingMode};
use crate::nn::layer::LayerSpec;
use crate::nn::network::Network;

pub const MAGIC: &[u8; 8] = b"GASLNET\0";
pub const VERSION: u32 = 1;

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + net.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match net.grouping() {
        GroupingMode::Structured => 0,
        GroupingMode::Unstructured => 1,
    });
    out.push(match net.dense_grouping() {
        DenseGrouping::Outgoing => 0,
        DenseGrouping::Incoming => 1,
    });
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    u32le(&mut out, net.input_shape().len());
    for &d in net.input_shape() {
        u32le(&mut out, d);
    }
    u32le(&mut out, net.layers().len());
    for layer in net.layers() {
        let (kind, fields) = match *layer {
            LayerSpec::Dense { inputs, outputs } => (0u8, [inputs, outputs, 0, 0, 0]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => (1, [in_channels, out_channels, kernel, stride, pad]),
            LayerSpec::MaxPool { size, stride } => (2, [size, stride, 0, 0, 0]),
            LayerSpec::Relu => (3, [0; 5]),
            LayerSpec::Flatten => (4, [0; 5]),
            LayerSpec::Softmax => (5, [0; 5]),
        };
        out.push(kind);
        for f in fields {
            u32le(&mut out, f);
        }
    }
    for t in net.params().tensors() {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Length {
                path: self.path.to_path_buf(),
                expected: self.at + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn format(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Network> {
    let mut r = Reader { bytes, at: 0, path };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(r.format(format!("bad magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.format(format!("unsupported checkpoint version {version}")));
    }
    let grouping = match r.u8()? {
        0 => GroupingMode::Structured,
        1 => GroupingMode::Unstructured,
        b => return Err(r.format(format!("bad grouping tag {b}"))),
    };
    let dense_grouping = match r.u8()? {
        0 => DenseGrouping::Outgoing,
        1 => DenseGrouping::Incoming,
        b => return Err(r.format(format!("bad dense grouping tag {b}"))),
    };
    let rank = r.u32()?;
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = r.u8()?;
        let f = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        layers.push(match kind {
            0 => LayerSpec::Dense { inputs: f[0], outputs: f[1] },
            1 => LayerSpec::Conv2d {
                in_channels: f[0],
                out_channels: f[1],
                kernel: f[2],
                stride: f[3],
                pad: f[4],
            },
            2 => LayerSpec::MaxPool { size: f[0], stride: f[1] },
            3 => LayerSpec::Relu,
            4 => LayerSpec::Flatten,
            5 => LayerSpec::Softmax,
            k => return Err(r.format(format!("unknown layer kind {k}"))),
        });
    }
    let mut net = Network::new(input_shape, layers)
        .map_err(|e| r.format(format!("inconsistent layer list: {e}")))?
        .with_grouping(grouping, dense_grouping);
    for t in net.params_mut().tensors_mut() {
        let n = r.u64()?;
        if n != t.len() {
            return Err(r.format(format!("tensor holds {n} values, layer expects {}", t.len())));
        }
        let raw = r.take(n * 8)?;
        for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if !t.is_finite() {
            return Err(r.format("non-finite weight"));
        }
    }
    if r.at != bytes.len() {
        return Err(r.format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(net)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, &encode(net))
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::{build_lenet, build_mlp};
    use crate::rng::RngStream;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for mut net in [build_mlp(), build_lenet()] {
            net.init_he(&mut RngStream::new(1));
            let path = dir.path().join("net.ckpt");
            save(&net, &path).unwrap();
            let back = load(&path).unwrap();
            assert_eq!(back, net);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let net = build_mlp();
        let mut bytes = encode(&net);
        let p = Path::new("mem");
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes, p), Err(Error::Length { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, p), Err(Error::Format { .. })));
    }
}
