//! Differentiable primitives with hand-derived backward passes.
//!
//! Convolution is cross-correlation (no kernel flip), lowered to a GEMM over
//! an im2col buffer. All reductions run in a fixed order, so results are
//! bit-reproducible on one machine.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Pad with `(k - 1) / 2` zeros; output keeps the input's spatial size.
    Zero,
    /// Valid convolution; output shrinks by `k - 1` per axis.
    None,
}

/// Weights `[Cout, Cin, k, k]` and bias `[Cout]` of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub padding: Padding,
}

/// Gradients of a convolution with respect to its weights, bias and input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub d_weights: Tensor,
    pub d_bias: Tensor,
    pub d_input: Tensor,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Tensor, padding: Padding) -> Result<Self> {
        let (cout, _, kh, kw) = weights.dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Header(format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                axis: "Cout",
                left: cout,
                right: bias.len(),
            });
        }
        Ok(ConvParams {
            weights,
            bias,
            padding,
        })
    }

    /// Zero-initialised parameters.
    pub fn zeros(cout: usize, cin: usize, kernel: usize, padding: Padding) -> Result<Self> {
        ConvParams::new(
            Tensor::zeros(&[cout, cin, kernel, kernel])?,
            Tensor::zeros(&[cout])?,
            padding,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn pad(&self) -> usize {
        match self.padding {
            Padding::Zero => (self.kernel() - 1) / 2,
            Padding::None => 0,
        }
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &Tensor, p: &ConvParams) -> Result<Self> {
        let (n, cin, h, w) = x.dims4()?;
        if cin != p.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: p.in_channels(),
                got: cin,
            });
        }
        let k = p.kernel();
        let pad = p.pad();
        let out = |axis, e: usize| {
            (e + 2 * pad)
                .checked_sub(k - 1)
                .filter(|&o| o > 0)
                .ok_or(Error::KernelTooLarge {
                    axis,
                    extent: e,
                    kernel: k,
                })
        };
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout: p.out_channels(),
            k,
            pad,
            oh: out("H", h)?,
            ow: out("W", w)?,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Row-major `C (m x n) = op(A) (m x k) * op(B) (k x n) + beta * C`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fill `col` (`[Cin*k*k, OH*OW]`) from one `[Cin, H, W]` image.
fn im2col(img: &[f64], g: &Geometry, col: &mut [f64]) {
    let (k, pad, ow) = (g.k, g.pad as isize, g.ow);
    for ci in 0..g.cin {
        let chan = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut col[r * g.cols()..(r + 1) * g.cols()];
                let dx = kx as isize - pad;
                // valid output columns: 0 <= ox + dx < w
                let lo = (-dx).clamp(0, ow as isize) as usize;
                let hi = (g.w as isize - dx).clamp(0, ow as isize) as usize;
                for oy in 0..g.oh {
                    let sy = oy as isize + ky as isize - pad;
                    let row = &mut dst[oy * ow..(oy + 1) * ow];
                    if sy < 0 || sy >= g.h as isize || lo >= hi {
                        row.fill(0.0);
                        continue;
                    }
                    let src = &chan[sy as usize * g.w..(sy as usize + 1) * g.w];
                    row[..lo].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    row[hi..].fill(0.0);
                }
            }
        }
    }
}

/// Accumulate `col` back into a `[Cin, H, W]` gradient buffer.
fn col2im(col: &[f64], g: &Geometry, img: &mut [f64]) {
    let (k, pad, ow) = (g.k, g.pad as isize, g.ow);
    for ci in 0..g.cin {
        let chan = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &col[r * g.cols()..(r + 1) * g.cols()];
                let dx = kx as isize - pad;
                let lo = (-dx).clamp(0, ow as isize) as usize;
                let hi = (g.w as isize - dx).clamp(0, ow as isize) as usize;
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let sy = oy as isize + ky as isize - pad;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let s0 = (lo as isize + dx) as usize;
                    let dst = &mut chan[sy as usize * g.w + s0..sy as usize * g.w + s0 + (hi - lo)];
                    for (d, s) in dst.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &Geometry) -> bool {
    g.k == 1 && g.pad == 0
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let g = Geometry::new(x, p)?;
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0.0; g.n * g.cout * cols];
    let mut col = if is_pointwise(&g) { Vec::new() } else { vec![0.0; rows * cols] };
    let in_plane = g.cin * g.h * g.w;
    for ni in 0..g.n {
        let img = &x.data()[ni * in_plane..(ni + 1) * in_plane];
        let b: &[f64] = if is_pointwise(&g) {
            img
        } else {
            im2col(img, &g, &mut col);
            &col
        };
        let dst = &mut out[ni * g.cout * cols..(ni + 1) * g.cout * cols];
        for (co, plane) in dst.chunks_exact_mut(cols).enumerate() {
            plane.fill(p.bias.data()[co]);
        }
        gemm(g.cout, rows, cols, p.weights.data(), false, b, false, 1.0, dst);
    }
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

pub fn conv2d_backward(x: &Tensor, p: &ConvParams, d_out: &Tensor) -> Result<LayerGrad> {
    let g = Geometry::new(x, p)?;
    if d_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::ShapeMismatch {
            axis: "d_out",
            left: g.n * g.cout * g.cols(),
            right: d_out.len(),
        });
    }
    let (rows, cols) = (g.rows(), g.cols());
    let mut d_w = vec![0.0; g.cout * rows];
    let mut d_b = vec![0.0; g.cout];
    let mut d_x = vec![0.0; x.len()];
    let pointwise = is_pointwise(&g);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * cols] };
    let mut d_col = vec![0.0; rows * cols];
    let in_plane = g.cin * g.h * g.w;
    for ni in 0..g.n {
        let img = &x.data()[ni * in_plane..(ni + 1) * in_plane];
        let dy = &d_out.data()[ni * g.cout * cols..(ni + 1) * g.cout * cols];
        for (co, plane) in dy.chunks_exact(cols).enumerate() {
            d_b[co] += plane.iter().sum::<f64>();
        }
        let b: &[f64] = if pointwise {
            img
        } else {
            im2col(img, &g, &mut col);
            &col
        };
        // dW += dY * col^T
        gemm(g.cout, cols, rows, dy, false, b, true, 1.0, &mut d_w);
        // dcol = W^T * dY
        gemm(rows, g.cout, cols, p.weights.data(), true, dy, false, 0.0, &mut d_col);
        let dst = &mut d_x[ni * in_plane..(ni + 1) * in_plane];
        if pointwise {
            for (d, s) in dst.iter_mut().zip(&d_col) {
                *d += s;
            }
        } else {
            col2im(&d_col, &g, dst);
        }
    }
    Ok(LayerGrad {
        d_weights: Tensor::new(p.weights.shape().to_vec(), d_w)?,
        d_bias: Tensor::new(vec![g.cout], d_b)?,
        d_input: Tensor::new(x.shape().to_vec(), d_x)?,
    })
}

/// Which input element won each 2x2 window.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolRecord {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

fn even_dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 {
        return Err(Error::OddExtent { axis: "H", extent: h });
    }
    if w % 2 != 0 {
        return Err(Error::OddExtent { axis: "W", extent: w });
    }
    Ok((n, c, h, w))
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major window order.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, PoolRecord)> {
    let (n, c, h, w) = even_dims(x)?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let record = PoolRecord {
        input_shape: x.shape().to_vec(),
        argmax,
    };
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, record))
}

pub fn maxpool2_backward(d_out: &Tensor, record: &PoolRecord) -> Result<Tensor> {
    if d_out.len() != record.argmax.len() {
        return Err(Error::ShapeMismatch {
            axis: "d_out",
            left: record.argmax.len(),
            right: d_out.len(),
        });
    }
    let mut d_x = Tensor::zeros(&record.input_shape)?;
    let dx = d_x.data_mut();
    for (&idx, &g) in record.argmax.iter().zip(d_out.data()) {
        dx[idx] += g;
    }
    Ok(d_x)
}

/// Nearest-neighbour 2x upsampling: every pixel becomes a 2x2 block.
pub fn upsample2_nearest(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            let row = &mut dst[2 * y * ow..(2 * y + 1) * ow];
            for (xi, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                row[2 * xi] = v;
                row[2 * xi + 1] = v;
            }
            dst.copy_within(2 * y * ow..(2 * y + 1) * ow, (2 * y + 1) * ow);
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Sum each 2x2 block of the incoming gradient.
pub fn upsample2_backward(d_out: &Tensor) -> Result<Tensor> {
    let (n, c, oh, ow) = even_dims(d_out)?;
    let (h, w) = (oh / 2, ow / 2);
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &d_out.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xi in 0..w {
                let t = 2 * y * ow + 2 * xi;
                dst[y * w + xi] = src[t] + src[t + 1] + src[t + ow] + src[t + ow + 1];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    same_shape(x, d_out)?;
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward through the logistic function, given its forward *output*.
pub fn sigmoid_backward(y: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    same_shape(y, d_out)?;
    let data = y
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let at = |ci: usize| base + ci * plane + p;
            let max = (0..c).map(|ci| src[at(ci)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for ci in 0..c {
                let e = (src[at(ci)] - max).exp();
                out[at(ci)] = e;
                sum += e;
            }
            for ci in 0..c {
                out[at(ci)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Backward through [`softmax_channels`], given its forward output.
pub fn softmax_channels_backward(y: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    same_shape(y, d_out)?;
    let (n, c, h, w) = y.dims4()?;
    let plane = h * w;
    let (ys, gs) = (y.data(), d_out.data());
    let mut out = vec![0.0; y.len()];
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let at = |ci: usize| base + ci * plane + p;
            let dot: f64 = (0..c).map(|ci| ys[at(ci)] * gs[at(ci)]).sum();
            for ci in 0..c {
                out[at(ci)] = ys[at(ci)] * (gs[at(ci)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            axis: "shape",
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}
