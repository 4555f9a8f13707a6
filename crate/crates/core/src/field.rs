//! Dense multi-channel 2-D fields and the linear operators built on them.
//!
//! Storage is channel-planar: `data[(c * height + y) * width + x]`, i.e.
//! row-major over the shape `(channels, height, width)`. Every linear
//! operator here comes with an exact adjoint so that reverse-mode gradients
//! can be transported through it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How out-of-range reads are resolved by [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BoundaryMode {
    /// Indices wrap around the domain edges.
    #[default]
    Periodic,
    /// Reads outside the domain return zero.
    ZeroPad,
}

/// A `height x width x channels` grid of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Field {
    /// All-zero field. Panics if any dimension is zero.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(
            height >= 1 && width >= 1 && channels >= 1,
            "field dimensions must be positive, got {height}x{width}x{channels}"
        );
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Wraps planar data. Fails if the length does not match the shape.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "field dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut out = Self::zeros(height, width, channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    out.data[(c * height + y) * width + x] = f(y, x, c);
                }
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Single-channel field holding channel `c`.
    pub fn channel(&self, c: usize) -> Field {
        Field {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.plane(c).to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Pointwise combination of two same-shape fields.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Field {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Field, scale: f64) -> Result<()> {
        self.expect_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Euclidean inner product over all entries.
    pub fn dot(&self, other: &Field) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &Field) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.shape() == other.shape()
    }

    pub fn same_spatial(&self, other: &Field) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn expect_same_shape(&self, other: &Field, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub(crate) fn expect_single_channel(&self, what: &str) -> Result<()> {
        if self.channels == 1 {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: expected a single-channel field, got {} channels",
                self.channels
            )))
        }
    }
}

/// A bank of 2-D convolution filters with one bias per output channel.
///
/// Weights are stored as `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    k_height: usize,
    k_width: usize,
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Kernel {
    pub fn zeros(k_height: usize, k_width: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::from_parts(
            k_height,
            k_width,
            in_channels,
            out_channels,
            vec![0.0; k_height * k_width * in_channels * out_channels],
            vec![0.0; out_channels],
        )
    }

    pub fn from_parts(
        k_height: usize,
        k_width: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if k_height.is_multiple_of(2) || k_width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel extents must be odd, got {k_height}x{k_width}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("kernel channel counts must be positive".into()));
        }
        if weights.len() != k_height * k_width * in_channels * out_channels {
            return Err(Error::Shape(format!(
                "kernel weight length {} does not match {k_height}x{k_width}x{in_channels}x{out_channels}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::Shape(format!(
                "kernel bias length {} does not match {out_channels} output channels",
                bias.len()
            )));
        }
        Ok(Self {
            k_height,
            k_width,
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    /// Single-channel kernel passing its input through unchanged.
    pub fn identity(size: usize) -> Result<Self> {
        let mut k = Self::zeros(size, size, 1, 1)?;
        let c = size / 2;
        k.weights[c * size + c] = 1.0;
        Ok(k)
    }

    pub fn k_height(&self) -> usize {
        self.k_height
    }

    pub fn k_width(&self) -> usize {
        self.k_width
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `[out, in, k_height, k_width]`
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.k_height, self.k_width]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * self.k_height + ky) * self.k_width + kx]
    }

    pub fn set_weight(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: f64) {
        let idx = ((o * self.in_channels + i) * self.k_height + ky) * self.k_width + kx;
        self.weights[idx] = v;
    }

    /// Number of trainable scalars (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Zero kernel of the same shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    pub fn same_shape(&self, other: &Kernel) -> bool {
        self.weight_shape() == other.weight_shape()
    }

    /// `self += scale * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Kernel, scale: f64) {
        assert!(self.same_shape(other), "kernel shape mismatch in add_scaled");
        for (a, &b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }
}

/// `(1/h^2) * [[0,1,0],[1,-4,1],[0,1,0]]`, the five-point Laplacian.
pub fn laplacian_stencil(h: f64) -> Result<Kernel> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("grid spacing must be positive, got {h}")));
    }
    let s = 1.0 / (h * h);
    Kernel::from_parts(
        3,
        3,
        1,
        1,
        vec![0.0, s, 0.0, s, -4.0 * s, s, 0.0, s, 0.0],
        vec![0.0],
    )
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the loop vectorizable; the summation order is
    // fixed, so results are reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], w: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

/// Calls `f(dst_range, src_range)` for the contiguous pieces of a 1-D shift
/// `dst[i] <- src[i + shift]` over `len` entries.
#[inline]
fn shifted_segments(len: usize, shift: isize, mode: BoundaryMode, mut f: impl FnMut(usize, usize, usize)) {
    match mode {
        BoundaryMode::Periodic => {
            let s = shift.rem_euclid(len as isize) as usize;
            // dst [0, len - s) reads src [s, len); dst [len - s, len) reads src [0, s)
            if len - s > 0 {
                f(0, s, len - s);
            }
            if s > 0 {
                f(len - s, 0, s);
            }
        }
        BoundaryMode::ZeroPad => {
            let lo = (-shift).max(0);
            let hi = (len as isize).min(len as isize - shift);
            if lo < hi {
                f(lo as usize, (lo + shift) as usize, (hi - lo) as usize);
            }
        }
    }
}

#[inline]
fn source_row(y: usize, dy: isize, height: usize, mode: BoundaryMode) -> Option<usize> {
    let sy = y as isize + dy;
    match mode {
        BoundaryMode::Periodic => Some(sy.rem_euclid(height as isize) as usize),
        BoundaryMode::ZeroPad => (sy >= 0 && sy < height as isize).then_some(sy as usize),
    }
}

/// `dst[y][x] += w * src[y + dy][x + dx]` on one plane.
fn shifted_axpy(
    dst: &mut [f64],
    src: &[f64],
    height: usize,
    width: usize,
    dy: isize,
    dx: isize,
    w: f64,
    mode: BoundaryMode,
) {
    if w == 0.0 {
        return;
    }
    for y in 0..height {
        let Some(sy) = source_row(y, dy, height, mode) else {
            continue;
        };
        let drow = &mut dst[y * width..(y + 1) * width];
        let srow = &src[sy * width..(sy + 1) * width];
        shifted_segments(width, dx, mode, |d0, s0, n| {
            axpy(&mut drow[d0..d0 + n], &srow[s0..s0 + n], w);
        });
    }
}

/// Rows `(i, ky, kx)` of the unrolled input: row `(i * kh + ky) * kw + kx`
/// holds `in[i](y + ky - rh, x + kx - rw)` over all `(y, x)`.
fn im2col(input: &Field, kh: usize, kw: usize, mode: BoundaryMode) -> Vec<f64> {
    let (h, w) = (input.height, input.width);
    let plane = h * w;
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut cols = vec![0.0; input.channels * kh * kw * plane];
    for i in 0..input.channels {
        let src = input.plane(i);
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (i * kh + ky) * kw + kx;
                let dst = &mut cols[r * plane..(r + 1) * plane];
                shifted_axpy(dst, src, h, w, ky as isize - rh, kx as isize - rw, 1.0, mode);
            }
        }
    }
    cols
}

/// `c = a * b` for row-major `a: m x k` and `b: k x n`, with explicit strides
/// so that either operand may be read transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserted extents keep every strided access inside the slices.
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

fn unrolled<'a>(input: &'a Field, kernel: &Kernel, mode: BoundaryMode, buf: &'a mut Vec<f64>) -> &'a [f64] {
    if kernel.k_height == 1 && kernel.k_width == 1 {
        &input.data
    } else {
        *buf = im2col(input, kernel.k_height, kernel.k_width, mode);
        buf
    }
}

/// Center-anchored cross-correlation with per-output-channel bias:
/// `out[o](y,x) = b[o] + sum_{i,ky,kx} K[o,i,ky,kx] * in[i](y+ky-rh, x+kx-rw)`.
pub fn conv2d(input: &Field, kernel: &Kernel, mode: BoundaryMode) -> Result<Field> {
    if kernel.in_channels != input.channels {
        return Err(Error::Config(format!(
            "conv2d: kernel expects {} input channels, field has {}",
            kernel.in_channels, input.channels
        )));
    }
    let plane = input.height * input.width;
    let mut out = Field::zeros(input.height, input.width, kernel.out_channels);
    for o in 0..kernel.out_channels {
        out.plane_mut(o).fill(kernel.bias[o]);
    }
    let kdim = kernel.in_channels * kernel.k_height * kernel.k_width;
    let mut buf = Vec::new();
    let cols = unrolled(input, kernel, mode, &mut buf);
    gemm(kernel.out_channels, kdim, plane, &kernel.weights, (kdim, 1), cols, (plane, 1), 1.0, &mut out.data);
    Ok(out)
}

/// Reverse-mode companion of [`conv2d`].
///
/// Given the upstream gradient `dL/d out`, returns `dL/dK` (weights and bias)
/// and `dL/d input`.
pub fn conv2d_adjoint(
    upstream: &Field,
    input: &Field,
    kernel: &Kernel,
    mode: BoundaryMode,
) -> Result<(Kernel, Field)> {
    let grad_kernel = conv2d_kernel_grad(upstream, input, kernel, mode)?;
    let grad_input = conv2d_input_grad(upstream, kernel, mode)?;
    Ok((grad_kernel, grad_input))
}

/// The weight/bias half of [`conv2d_adjoint`].
pub fn conv2d_kernel_grad(
    upstream: &Field,
    input: &Field,
    kernel: &Kernel,
    mode: BoundaryMode,
) -> Result<Kernel> {
    check_adjoint_shapes(upstream, Some(input), kernel)?;
    let plane = input.height * input.width;
    let mut grad = kernel.zeros_like();
    for o in 0..kernel.out_channels {
        grad.bias[o] = upstream.plane(o).iter().sum();
    }
    let kdim = kernel.in_channels * kernel.k_height * kernel.k_width;
    let mut buf = Vec::new();
    let cols = unrolled(input, kernel, mode, &mut buf);
    // dK[o, r] = sum_p up[o, p] * cols[r, p]
    gemm(kernel.out_channels, plane, kdim, &upstream.data, (plane, 1), cols, (1, plane), 0.0, &mut grad.weights);
    Ok(grad)
}

/// The input half of [`conv2d_adjoint`]: the transpose of the linear part of
/// the convolution applied to `upstream`.
pub fn conv2d_input_grad(upstream: &Field, kernel: &Kernel, mode: BoundaryMode) -> Result<Field> {
    check_adjoint_shapes(upstream, None, kernel)?;
    let (h, w) = (upstream.height, upstream.width);
    let plane = h * w;
    let (kh, kw) = (kernel.k_height, kernel.k_width);
    let kdim = kernel.in_channels * kh * kw;
    let mut dcols = vec![0.0; kdim * plane];
    // dcols[r, p] = sum_o K[o, r] * up[o, p]
    gemm(kdim, kernel.out_channels, plane, &kernel.weights, (1, kdim), &upstream.data, (plane, 1), 0.0, &mut dcols);
    if kh == 1 && kw == 1 {
        return Field::from_vec(h, w, kernel.in_channels, dcols);
    }
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut grad = Field::zeros(h, w, kernel.in_channels);
    for i in 0..kernel.in_channels {
        let dst = grad.plane_mut(i);
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (i * kh + ky) * kw + kx;
                // in(y+dy, x+dx) fed out(y, x), so in(y', x') collects out(y'-dy, x'-dx)
                shifted_axpy(dst, &dcols[r * plane..(r + 1) * plane], h, w, rh - ky as isize, rw - kx as isize, 1.0, mode);
            }
        }
    }
    Ok(grad)
}

fn check_adjoint_shapes(upstream: &Field, input: Option<&Field>, kernel: &Kernel) -> Result<()> {
    if upstream.channels != kernel.out_channels {
        return Err(Error::Config(format!(
            "conv2d_adjoint: upstream has {} channels, kernel produces {}",
            upstream.channels, kernel.out_channels
        )));
    }
    if let Some(input) = input {
        if input.channels != kernel.in_channels {
            return Err(Error::Config(format!(
                "conv2d_adjoint: input has {} channels, kernel expects {}",
                input.channels, kernel.in_channels
            )));
        }
        if !input.same_spatial(upstream) {
            return Err(Error::Config(format!(
                "conv2d_adjoint: input {}x{} and upstream {}x{} differ",
                input.height, input.width, upstream.height, upstream.width
            )));
        }
    }
    Ok(())
}

/// 2x2 average pooling.
pub fn downsample_avg2(input: &Field) -> Result<Field> {
    let (h, w, c) = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "downsample_avg2 needs even dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Field::zeros(oh, ow, c);
    for ch in 0..c {
        let src = input.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..oh {
            let r0 = &src[2 * y * w..(2 * y + 1) * w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..ow {
                dst[y * ow + x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`downsample_avg2`]: spreads a quarter of each value over its block.
pub fn downsample_avg2_adjoint(upstream: &Field) -> Field {
    let mut out = upsample_nn2(upstream);
    out.scale(0.25);
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nn2(input: &Field) -> Field {
    let (h, w, c) = input.shape();
    let ow = 2 * w;
    let mut out = Field::zeros(2 * h, ow, c);
    for ch in 0..c {
        let src = input.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let (top, rest) = dst[2 * y * ow..].split_at_mut(ow);
            for (x, &v) in row.iter().enumerate() {
                top[2 * x] = v;
                top[2 * x + 1] = v;
            }
            rest[..ow].copy_from_slice(top);
        }
    }
    out
}

/// Adjoint of [`upsample_nn2`]: 2x2 block sums.
pub fn upsample_nn2_adjoint(upstream: &Field) -> Result<Field> {
    let mut out = downsample_avg2(upstream)?;
    out.scale(4.0);
    Ok(out)
}

/// Stacks the channels of `a` followed by those of `b`.
pub fn concat_channels(a: &Field, b: &Field) -> Result<Field> {
    if !a.same_spatial(b) {
        return Err(Error::Shape(format!(
            "concat_channels: spatial sizes {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Field::from_vec(a.height, a.width, a.channels + b.channels, data)
}

/// Adjoint of [`concat_channels`]: splits after the first `first_channels`.
pub fn split_channels(upstream: &Field, first_channels: usize) -> Result<(Field, Field)> {
    if first_channels == 0 || first_channels >= upstream.channels {
        return Err(Error::Shape(format!(
            "split_channels: cannot split {} channels at {first_channels}",
            upstream.channels
        )));
    }
    let n = first_channels * upstream.plane_len();
    let (h, w) = (upstream.height, upstream.width);
    Ok((
        Field::from_vec(h, w, first_channels, upstream.data[..n].to_vec())?,
        Field::from_vec(h, w, upstream.channels - first_channels, upstream.data[n..].to_vec())?,
    ))
}

/// Channel mean, used wherever a single intensity channel is needed.
pub fn luminance(f: &Field) -> Field {
    if f.channels == 1 {
        return f.clone();
    }
    let n = f.plane_len();
    let mut out = Field::zeros(f.height, f.width, 1);
    let inv = 1.0 / f.channels as f64;
    for c in 0..f.channels {
        axpy(&mut out.data, &f.data[c * n..(c + 1) * n], inv);
    }
    out
}
