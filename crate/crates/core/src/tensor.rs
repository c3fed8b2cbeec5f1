//! Dense row-major `f32` tensors and the raw kernels behind the autodiff ops.
//!
//! Layout is always `N, C, H, W` for image-shaped data. Convolution is
//! cross-correlation (no kernel flip) lowered to GEMM through an im2col
//! buffer; every kernel is single-threaded with a fixed accumulation order,
//! so repeated calls on identical inputs are bit-identical.

use crate::error::{Result, SnnError};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SnnError::invalid(
                "tensor",
                format!("shape {shape:?} holds {numel} values but {} were given", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(SnnError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "{op}: shape mismatch between {:?} and {:?}",
            self.shape, other.shape
        );
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn l2_norm(&self) -> f32 {
        self.data.iter().map(|x| x * x).sum::<f32>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0 || x == 1.0)
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor {
            shape,
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Gathers rows of the leading axis in the given order.
    pub fn select_batch(&self, rows: &[usize]) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.data[r * per..(r + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(SnnError::invalid(op, format!("expected a rank-4 tensor, got shape {other:?}"))),
        }
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, wcin, kh, kw]) = (input, weight) else {
            return Err(SnnError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        };
        if cin != wcin {
            return Err(SnnError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        if stride == 0 {
            return Err(SnnError::invalid("conv2d", "stride must be >= 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(SnnError::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: cin,
            in_h: h,
            in_w: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    /// Rows of the im2col matrix: `Cin * Kh * Kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::sgemm(
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfolds one image `[Cin, H, W]` into `[Cin*Kh*Kw, Hout*Wout]`, zero-padded.
fn im2col(g: &ConvGeometry, image: &[f32], cols: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
fn col2im(g: &ConvGeometry, cols: &[f32], image: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution without bias.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f32], weight: &[f32]) -> Vec<f32> {
    let positions = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_per = g.in_channels * g.in_h * g.in_w;
    let out_per = g.out_channels * positions;
    let mut out = vec![0.0; g.batch * out_per];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * positions] };
    for n in 0..g.batch {
        let image = &input[n * in_per..(n + 1) * in_per];
        let b: &[f32] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        gemm(
            g.out_channels,
            k,
            positions,
            weight,
            (k, 1),
            b,
            (positions, 1),
            0.0,
            &mut out[n * out_per..(n + 1) * out_per],
            (positions, 1),
        );
    }
    out
}

/// Gradient of `<conv2d(x, w), dy>` with respect to `x`.
pub fn conv2d_grad_input(g: &ConvGeometry, grad_out: &[f32], weight: &[f32]) -> Vec<f32> {
    let positions = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_per = g.in_channels * g.in_h * g.in_w;
    let out_per = g.out_channels * positions;
    let mut grad_in = vec![0.0; g.batch * in_per];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * positions] };
    for n in 0..g.batch {
        let dy = &grad_out[n * out_per..(n + 1) * out_per];
        let dst = &mut grad_in[n * in_per..(n + 1) * in_per];
        // weight^T: [k x cout] viewed through strides (1, k)
        if g.is_pointwise() {
            gemm(k, g.out_channels, positions, weight, (1, k), dy, (positions, 1), 0.0, dst, (positions, 1));
        } else {
            gemm(
                k,
                g.out_channels,
                positions,
                weight,
                (1, k),
                dy,
                (positions, 1),
                0.0,
                &mut cols,
                (positions, 1),
            );
            col2im(g, &cols, dst);
        }
    }
    grad_in
}

/// Gradient of `<conv2d(x, w), dy>` with respect to `w`.
pub fn conv2d_grad_weight(g: &ConvGeometry, input: &[f32], grad_out: &[f32]) -> Vec<f32> {
    let positions = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_per = g.in_channels * g.in_h * g.in_w;
    let out_per = g.out_channels * positions;
    let mut grad_w = vec![0.0; g.out_channels * k];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * positions] };
    for n in 0..g.batch {
        let image = &input[n * in_per..(n + 1) * in_per];
        let b: &[f32] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        let dy = &grad_out[n * out_per..(n + 1) * out_per];
        // cols^T: [positions x k] viewed through strides (1, positions)
        gemm(
            g.out_channels,
            positions,
            k,
            dy,
            (positions, 1),
            b,
            (1, positions),
            1.0,
            &mut grad_w,
            (k, 1),
        );
    }
    grad_w
}

/// Number of nonzero inputs inside each output position's receptive field,
/// summed over all positions of all images. Multiplying by `Cout` gives the
/// accumulate count of a convolution driven by that input.
pub fn receptive_field_activity(g: &ConvGeometry, input: &[f32]) -> u64 {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    let in_per = g.in_channels * g.in_h * g.in_w;
    let mut total = 0u64;
    for n in 0..g.batch {
        let image = &input[n * in_per..(n + 1) * in_per];
        for c in 0..g.in_channels {
            let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for (idx, &v) in plane.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                // count output positions whose window covers (iy, ix)
                let (iy, ix) = ((idx / g.in_w) as isize, (idx % g.in_w) as isize);
                let rows = covering_outputs(iy + pad, g.kernel_h, g.stride, oh);
                let cols = covering_outputs(ix + pad, g.kernel_w, g.stride, ow);
                total += (rows * cols) as u64;
            }
        }
    }
    total
}

/// Count of output indices `o < out_len` with `o*stride <= p < o*stride + kernel`.
fn covering_outputs(p: isize, kernel: usize, stride: usize, out_len: usize) -> usize {
    let (k, s) = (kernel as isize, stride as isize);
    // o >= (p - k + 1) / s (ceil) and o <= p / s (floor)
    let lo = (p - k + 1).max(0);
    let lo = (lo + s - 1) / s;
    let hi = (p / s).min(out_len as isize - 1);
    if hi < lo {
        0
    } else {
        (hi - lo + 1) as usize
    }
}

/// Max-pool window geometry (no padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], kernel: usize, stride: usize) -> Result<Self> {
        let &[n, c, h, w] = input else {
            return Err(SnnError::invalid("maxpool2d", format!("expected rank-4 input, got {input:?}")));
        };
        if kernel == 0 || stride == 0 {
            return Err(SnnError::invalid("maxpool2d", "kernel and stride must be >= 1"));
        }
        if kernel > h || kernel > w {
            return Err(SnnError::invalid(
                "maxpool2d",
                format!("kernel {kernel} larger than input {h}x{w}"),
            ));
        }
        Ok(PoolGeometry {
            batch: n,
            channels: c,
            in_h: h,
            in_w: w,
            kernel,
            stride,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.out_h(), self.out_w()]
    }
}

/// Flat input index of each window's maximum; ties go to the first element
/// in row-major scan order.
pub fn maxpool_argmax(g: &PoolGeometry, input: &[f32]) -> Vec<usize> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut idx = Vec::with_capacity(g.batch * g.channels * oh * ow);
    for plane in 0..g.batch * g.channels {
        let base = plane * g.in_h * g.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * g.stride * g.in_w + ox * g.stride;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let i = base + (oy * g.stride + ky) * g.in_w + ox * g.stride + kx;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}
