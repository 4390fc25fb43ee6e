//! Versioned binary model container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  b"CNWK"
//! version    u32      currently 1
//! layers     u32      K
//! sizes      K x u32
//! acts       (K-1) x u8          0 = relu, 1 = sigmoid, 2 = identity
//! weights    per layer k: sizes[k+1]*sizes[k] x f64, row-major
//! biases     per layer k: sizes[k+1] x f64
//! nscaling   u32
//! scalings   per entry: after_layer u32, sizes[after_layer+1] x f64
//! has_mask   u8
//! mask       if 1: weight keep flags then scaling keep flags, one u8 each
//! ```
//!
//! Round-trips are bit-exact for every f64. Malformed payloads produce a
//! parse error carrying the byte offset of the failure.

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::network::{Activation, LayeredNetwork, PruneMask, ScalingLayer};

const MAGIC: &[u8; 4] = b"CNWK";
pub const FORMAT_VERSION: u32 = 1;

pub fn serialize(net: &LayeredNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layer_count() as u32).to_le_bytes());
    for &s in net.sizes() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for &a in net.activations() {
        out.push(match a {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Identity => 2,
        });
    }
    for w in net.weights() {
        for &x in w.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for b in net.biases() {
        for &x in b {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&(net.scalings().len() as u32).to_le_bytes());
    for s in net.scalings() {
        out.extend_from_slice(&(s.after_weight_layer as u32).to_le_bytes());
        for &x in &s.factors {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    match net.mask() {
        None => out.push(0),
        Some(mask) => {
            out.push(1);
            for keep in &mask.weights {
                out.extend(keep.iter().map(|&k| k as u8));
            }
            for keep in &mask.scalings {
                out.extend(keep.iter().map(|&k| k as u8));
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.offset,
                message: format!(
                    "truncated payload while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(8 * n, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.offset,
            message: message.into(),
        }
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<LayeredNetwork> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(r.error(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let k = r.u32("layer count")? as usize;
    if !(2..=10_000).contains(&k) {
        return Err(r.error(format!("implausible layer count {k}")));
    }
    let mut sizes = Vec::with_capacity(k);
    for _ in 0..k {
        sizes.push(r.u32("layer size")? as usize);
    }
    let mut activations = Vec::with_capacity(k - 1);
    for _ in 0..k - 1 {
        activations.push(match r.u8("activation tag")? {
            0 => Activation::Relu,
            1 => Activation::Sigmoid,
            2 => Activation::Identity,
            other => return Err(r.error(format!("unknown activation tag {other}"))),
        });
    }
    let mut weights = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        let (rows, cols) = (sizes[i + 1], sizes[i]);
        let data = r.f64s(rows * cols, "weights")?;
        weights.push(Mat::from_vec(rows, cols, data));
    }
    let mut biases = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        biases.push(r.f64s(sizes[i + 1], "biases")?);
    }
    let nscaling = r.u32("scaling count")? as usize;
    let mut scalings = Vec::with_capacity(nscaling);
    for _ in 0..nscaling {
        let after = r.u32("scaling position")? as usize;
        if after + 1 >= sizes.len() {
            return Err(r.error(format!("scaling position {after} out of range")));
        }
        let factors = r.f64s(sizes[after + 1], "scaling factors")?;
        scalings.push(ScalingLayer {
            after_weight_layer: after,
            factors,
        });
    }
    let mask = match r.u8("mask flag")? {
        0 => None,
        1 => {
            let mut wmasks = Vec::with_capacity(k - 1);
            for i in 0..k - 1 {
                let n = sizes[i + 1] * sizes[i];
                let raw = r.take(n, "weight mask")?;
                wmasks.push(raw.iter().map(|&b| b != 0).collect());
            }
            let mut smasks = Vec::with_capacity(nscaling);
            for s in &scalings {
                let raw = r.take(s.factors.len(), "scaling mask")?;
                smasks.push(raw.iter().map(|&b| b != 0).collect());
            }
            Some(PruneMask {
                weights: wmasks,
                scalings: smasks,
            })
        }
        other => return Err(r.error(format!("bad mask flag {other}"))),
    };
    if r.offset != bytes.len() {
        return Err(r.error(format!("{} trailing bytes", bytes.len() - r.offset)));
    }
    LayeredNetwork::from_parts(sizes, weights, biases, activations, scalings, mask)
}

pub fn save(net: &LayeredNetwork, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, serialize(net))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<LayeredNetwork> {
    deserialize(&std::fs::read(path)?)
}
