//! Dense `f64` tensors in NCHW layout and the LAUG binary tensor format.
//!
//! A LAUG file is the 4-byte magic `LAUG`, the rank as a little-endian
//! `u32`, one little-endian `u32` per extent, then the payload as
//! little-endian IEEE-754 `f32` values in row-major order. Values are held
//! as `f64` in memory, so writing rounds to the nearest `f32`.

use crate::error::{Error, Result};

pub const LAUG_MAGIC: &[u8; 4] = b"LAUG";
const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::ExtentOverflow(format!("{shape:?}")))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn from_fn4(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let len = check_shape(&shape)?;
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(len);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f(ni, ci, hi, wi));
                    }
                }
            }
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Rank {
                expected: 4,
                got: self.shape.clone(),
            }),
        }
    }

    #[inline]
    pub fn index4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = &self.shape;
        ((n * s[1] + c) * s[2] + h) * s[3] + w
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index4(n, c, h, w)]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                axis: "shape",
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Item `n` of the batch axis as a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        let (nn, c, h, w) = self.dims4()?;
        if n >= nn {
            return Err(Error::ShapeMismatch {
                axis: "N",
                left: n,
                right: nn,
            });
        }
        let plane = c * h * w;
        Ok(Tensor {
            shape: vec![1, c, h, w],
            data: self.data[n * plane..(n + 1) * plane].to_vec(),
        })
    }

    /// Stack equally-shaped `[C, H, W]` (or `[1, C, H, W]`) tensors along a new batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::EmptyDataset)?;
        let inner: Vec<usize> = match first.shape[..] {
            [1, c, h, w] => vec![c, h, w],
            [c, h, w] => vec![c, h, w],
            [h, w] => vec![1, h, w],
            _ => {
                return Err(Error::Rank {
                    expected: 3,
                    got: first.shape.clone(),
                })
            }
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.len() != first.len() || t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    axis: "item",
                    left: first.len(),
                    right: t.len(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }
}

/// Concatenate along the channel axis: channels of `a` precede channels of `b`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    for (axis, l, r) in [("N", na, nb), ("H", ha, hb), ("W", wa, wb)] {
        if l != r {
            return Err(Error::ShapeMismatch { axis, left: l, right: r });
        }
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(&a.data[n * ca * plane..(n + 1) * ca * plane]);
        data.extend_from_slice(&b.data[n * cb * plane..(n + 1) * cb * plane]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], data)
}

/// Channels `start..end` of a rank-4 tensor.
pub fn slice_channels(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if start >= end || end > c {
        return Err(Error::ShapeMismatch {
            axis: "C",
            left: end,
            right: c,
        });
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (end - start) * plane);
    for ni in 0..n {
        let base = ni * c * plane;
        data.extend_from_slice(&t.data[base + start * plane..base + end * plane]);
    }
    Tensor::new(vec![n, end - start, h, w], data)
}

/// Serialize to the LAUG format.
pub fn write_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    encode_tensor_into(t, &mut out);
    out
}

pub(crate) fn encode_tensor_into(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(LAUG_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in &t.shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Parse a complete LAUG file; trailing bytes are rejected.
pub fn read_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Header(format!(
            "{} trailing bytes after tensor payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

/// Parse one LAUG tensor from the front of `bytes`, returning it and the byte count consumed.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut r = ByteReader::new(bytes);
    let t = decode_tensor(&mut r)?;
    Ok((t, r.position()))
}

pub(crate) fn decode_tensor(r: &mut ByteReader<'_>) -> Result<Tensor> {
    let magic = r.take(4)?;
    if magic != LAUG_MAGIC {
        return Err(Error::BadMagic {
            expected: "LAUG".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let rank = r.u32()? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Header(format!("rank {rank} outside 1..=4")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let count = check_shape(&shape)?;
    let payload = count
        .checked_mul(4)
        .ok_or_else(|| Error::ExtentOverflow(format!("{shape:?}")))?;
    let raw = r.take(payload)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Tensor { shape, data })
}
