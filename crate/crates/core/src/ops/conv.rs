//! 2-D cross-correlation and its transpose.
//!
//! Weights are laid out `(c_out, c_in, k_h, k_w)` for [`conv2d`]. A transposed
//! convolution reuses the layout of the convolution it is the adjoint of, so
//! for [`deconv2d`] the weight is `(c_in, c_out, k_h, k_w)`.
//!
//! Output sizes use floor division: `(h + 2p - k) / s + 1`. Rows or columns
//! that a strided window never reaches receive zero input gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Vec<f64>, stride: usize, padding: usize) -> Result<Self> {
        let p = Self {
            weight,
            bias,
            stride,
            padding,
        };
        p.validate("conv_params", p.weight.shape().n)?;
        Ok(p)
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros(Shape::new(c_out, c_in, k, k)),
            bias: vec![0.0; c_out],
            stride,
            padding,
        }
    }

    /// Glorot-uniform weights and zero bias for a `c_in -> c_out` convolution.
    pub fn xavier<R: Rng + ?Sized>(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let limit = xavier_limit(c_in * k * k, c_out * k * k);
        Self {
            weight: Tensor::uniform(Shape::new(c_out, c_in, k, k), -limit, limit, rng),
            bias: vec![0.0; c_out],
            stride,
            padding,
        }
    }

    /// Glorot-uniform parameters for a `c_in -> c_out` transposed convolution.
    pub fn xavier_transposed<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let limit = xavier_limit(c_in * k * k, c_out * k * k);
        Self {
            weight: Tensor::uniform(Shape::new(c_in, c_out, k, k), -limit, limit, rng),
            bias: vec![0.0; c_out],
            stride,
            padding: 0,
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    fn validate(&self, op: &'static str, bias_len: usize) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidShape {
                op,
                detail: "stride must be positive".into(),
            });
        }
        if self.bias.len() != bias_len {
            return Err(Error::InvalidShape {
                op,
                detail: format!(
                    "bias has {} entries, expected {bias_len} for weight {}",
                    self.bias.len(),
                    self.weight.shape()
                ),
            });
        }
        Ok(())
    }
}

pub fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Output length of a strided window sweep, `None` if the window never fits.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (out_h, out_w) = conv_output_dims(input.shape(), p)?;
    let mut out = gather(input, &p.weight, p.stride, p.padding, out_h, out_w);
    add_bias(&mut out, &p.bias);
    Ok(out)
}

pub fn conv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let (out_h, out_w) = conv_output_dims(input.shape(), p)?;
    let expected = Shape::new(input.shape().n, p.weight.shape().n, out_h, out_w);
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: expected,
            rhs: grad_out.shape(),
        });
    }
    let s = input.shape();
    Ok(ConvGrads {
        input: scatter(grad_out, &p.weight, p.stride, p.padding, s.h, s.w),
        weight: weight_grad(input, grad_out, p.weight.shape(), p.stride, p.padding),
        bias: channel_sums(grad_out),
    })
}

pub fn deconv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (out_h, out_w) = deconv_output_dims(input.shape(), p)?;
    let mut out = scatter(input, &p.weight, p.stride, p.padding, out_h, out_w);
    add_bias(&mut out, &p.bias);
    Ok(out)
}

pub fn deconv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let (out_h, out_w) = deconv_output_dims(input.shape(), p)?;
    let expected = Shape::new(input.shape().n, p.weight.shape().c, out_h, out_w);
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "deconv2d_backward",
            lhs: expected,
            rhs: grad_out.shape(),
        });
    }
    let s = input.shape();
    Ok(ConvGrads {
        input: gather(grad_out, &p.weight, p.stride, p.padding, s.h, s.w),
        weight: weight_grad(grad_out, input, p.weight.shape(), p.stride, p.padding),
        bias: channel_sums(grad_out),
    })
}

fn conv_output_dims(input: Shape, p: &ConvParams) -> Result<(usize, usize)> {
    let w = p.weight.shape();
    p.validate("conv2d", w.n)?;
    if input.c != w.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input,
            rhs: w,
        });
    }
    match (
        conv_out_len(input.h, w.h, p.stride, p.padding),
        conv_out_len(input.w, w.w, p.stride, p.padding),
    ) {
        (Some(h), Some(wd)) => Ok((h, wd)),
        _ => Err(Error::InvalidShape {
            op: "conv2d",
            detail: format!(
                "kernel {}x{} with padding {} does not fit input {input}",
                w.h, w.w, p.padding
            ),
        }),
    }
}

fn deconv_output_dims(input: Shape, p: &ConvParams) -> Result<(usize, usize)> {
    let w = p.weight.shape();
    p.validate("deconv2d", w.c)?;
    if input.c != w.n {
        return Err(Error::ShapeMismatch {
            op: "deconv2d",
            lhs: input,
            rhs: w,
        });
    }
    let len = |n: usize, k: usize| ((n - 1) * p.stride + k).checked_sub(2 * p.padding);
    match (len(input.h, w.h), len(input.w, w.w)) {
        (Some(h), Some(wd)) if h > 0 && wd > 0 => Ok((h, wd)),
        _ => Err(Error::InvalidShape {
            op: "deconv2d",
            detail: format!("padding {} leaves no output for input {input}", p.padding),
        }),
    }
}

/// Output positions `o` in `[lo, hi)` whose source `o * stride + k - pad`
/// lands inside `[0, in_len)`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if in_len + pad <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Strided sampling pattern of one kernel offset.
#[derive(Clone, Copy)]
struct Window {
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
    /// Dense (image) side.
    h: usize,
    w: usize,
    /// Sampled (output) side.
    out_h: usize,
    out_w: usize,
}

impl Window {
    /// Sampling is the identity map, so no patch copy is needed.
    fn is_identity(&self) -> bool {
        self.stride == 1 && self.pad == 0 && self.ky == 0 && self.kx == 0 && self.h == self.out_h && self.w == self.out_w
    }

    /// `buf[c][y * out_w + x] = img[c][y * s + ky - p][x * s + kx - p]`, zero outside.
    fn sample(&self, img: &[f64], channels: usize, buf: &mut [f64]) {
        buf.fill(0.0);
        let (y_lo, y_hi) = valid_range(self.ky, self.stride, self.pad, self.h, self.out_h);
        let (x_lo, x_hi) = valid_range(self.kx, self.stride, self.pad, self.w, self.out_w);
        for c in 0..channels {
            let src = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            let dst = &mut buf[c * self.out_h * self.out_w..(c + 1) * self.out_h * self.out_w];
            for y in y_lo..y_hi {
                let iy = y * self.stride + self.ky - self.pad;
                let row = &src[iy * self.w..(iy + 1) * self.w];
                let out = &mut dst[y * self.out_w..(y + 1) * self.out_w];
                if self.stride == 1 {
                    let off = x_lo + self.kx - self.pad;
                    out[x_lo..x_hi].copy_from_slice(&row[off..off + x_hi - x_lo]);
                } else {
                    for x in x_lo..x_hi {
                        out[x] = row[x * self.stride + self.kx - self.pad];
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::sample`]: adds `buf` back onto the dense image.
    fn add_back(&self, buf: &[f64], channels: usize, img: &mut [f64]) {
        let (y_lo, y_hi) = valid_range(self.ky, self.stride, self.pad, self.h, self.out_h);
        let (x_lo, x_hi) = valid_range(self.kx, self.stride, self.pad, self.w, self.out_w);
        for c in 0..channels {
            let src = &buf[c * self.out_h * self.out_w..(c + 1) * self.out_h * self.out_w];
            let dst = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for y in y_lo..y_hi {
                let iy = y * self.stride + self.ky - self.pad;
                let row = &mut dst[iy * self.w..(iy + 1) * self.w];
                let inp = &src[y * self.out_w..(y + 1) * self.out_w];
                if self.stride == 1 {
                    let off = x_lo + self.kx - self.pad;
                    for (d, s) in row[off..off + x_hi - x_lo].iter_mut().zip(&inp[x_lo..x_hi]) {
                        *d += s;
                    }
                } else {
                    for x in x_lo..x_hi {
                        row[x * self.stride + self.kx - self.pad] += inp[x];
                    }
                }
            }
        }
    }
}

/// `c (m x n) += a (m x k) * b (k x n)`, all row-major.
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let v = br[j];
                c0[j] += a0 * v;
                c1[j] += a1 * v;
                c2[j] += a2 * v;
                c3[j] += a3 * v;
            }
        }
        i += 4;
    }
    for i in i..m {
        let cr = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cj, bj) in cr.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cj += av * bj;
            }
        }
    }
}

/// `c (m x n) += a (m x k) * b (n x k)^T`.
fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = [0.0; 4];
            let (ac, bc) = (ar.chunks_exact(4), br.chunks_exact(4));
            let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
            for (x, y) in ac.zip(bc) {
                for l in 0..4 {
                    acc[l] += x[l] * y[l];
                }
            }
            c[i * n + j] += (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
        }
    }
}

/// Weight slice `w[.., .., ky, kx]` as a dense matrix, transposed when asked.
fn weight_slice(w: &Tensor, ky: usize, kx: usize, transpose: bool, out: &mut [f64]) {
    let ws = w.shape();
    for o in 0..ws.n {
        for i in 0..ws.c {
            let v = w.data()[ws.offset(o, i, ky, kx)];
            let at = if transpose { i * ws.n + o } else { o * ws.c + i };
            out[at] = v;
        }
    }
}

/// `out[n,o,y,x] = sum_{i,ky,kx} x[n,i,y*s+ky-p,x*s+kx-p] * w[o,i,ky,kx]`
fn gather(x: &Tensor, w: &Tensor, stride: usize, pad: usize, out_h: usize, out_w: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let plane = out_h * out_w;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, out_h, out_w));
    let mut wk = vec![0.0; ws.n * ws.c];
    let mut patch = vec![0.0; ws.c * plane];
    let in_size = xs.c * xs.h * xs.w;
    for ky in 0..ws.h {
        for kx in 0..ws.w {
            let win = Window { ky, kx, stride, pad, h: xs.h, w: xs.w, out_h, out_w };
            weight_slice(w, ky, kx, false, &mut wk);
            for n in 0..xs.n {
                let img = &x.data()[n * in_size..(n + 1) * in_size];
                let src = if win.is_identity() {
                    img
                } else {
                    win.sample(img, xs.c, &mut patch);
                    &patch
                };
                let dst = &mut out.data_mut()[n * ws.n * plane..(n + 1) * ws.n * plane];
                gemm_acc(ws.n, ws.c, plane, &wk, src, dst);
            }
        }
    }
    out
}

/// Adjoint of [`gather`] in its input: `dst[n,i,y*s+ky-p,x*s+kx-p] += g[n,o,y,x] * w[o,i,ky,kx]`.
fn scatter(g: &Tensor, w: &Tensor, stride: usize, pad: usize, dst_h: usize, dst_w: usize) -> Tensor {
    let gs = g.shape();
    let ws = w.shape();
    let plane = gs.h * gs.w;
    let dst_size = ws.c * dst_h * dst_w;
    let mut out = Tensor::zeros(Shape::new(gs.n, ws.c, dst_h, dst_w));
    let mut wk = vec![0.0; ws.n * ws.c];
    let mut patch = vec![0.0; ws.c * plane];
    for ky in 0..ws.h {
        for kx in 0..ws.w {
            let win = Window { ky, kx, stride, pad, h: dst_h, w: dst_w, out_h: gs.h, out_w: gs.w };
            weight_slice(w, ky, kx, true, &mut wk);
            for n in 0..gs.n {
                let src = &g.data()[n * ws.n * plane..(n + 1) * ws.n * plane];
                let dst = &mut out.data_mut()[n * dst_size..(n + 1) * dst_size];
                if win.is_identity() {
                    gemm_acc(ws.c, ws.n, plane, &wk, src, dst);
                } else {
                    patch.fill(0.0);
                    gemm_acc(ws.c, ws.n, plane, &wk, src, &mut patch);
                    win.add_back(&patch, ws.c, dst);
                }
            }
        }
    }
    out
}

/// `dw[o,i,ky,kx] = sum_{n,y,x} g[n,o,y,x] * x[n,i,y*s+ky-p,x*s+kx-p]`
fn weight_grad(x: &Tensor, g: &Tensor, w_shape: Shape, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let gs = g.shape();
    let plane = gs.h * gs.w;
    let in_size = xs.c * xs.h * xs.w;
    let mut dw = Tensor::zeros(w_shape);
    let mut dwk = vec![0.0; w_shape.n * w_shape.c];
    let mut patch = vec![0.0; xs.c * plane];
    for ky in 0..w_shape.h {
        for kx in 0..w_shape.w {
            let win = Window { ky, kx, stride, pad, h: xs.h, w: xs.w, out_h: gs.h, out_w: gs.w };
            dwk.fill(0.0);
            for n in 0..xs.n {
                let img = &x.data()[n * in_size..(n + 1) * in_size];
                let src = if win.is_identity() {
                    img
                } else {
                    win.sample(img, xs.c, &mut patch);
                    &patch
                };
                let gn = &g.data()[n * w_shape.n * plane..(n + 1) * w_shape.n * plane];
                gemm_nt_acc(w_shape.n, plane, w_shape.c, gn, src, &mut dwk);
            }
            for o in 0..w_shape.n {
                for i in 0..w_shape.c {
                    dw.set(o, i, ky, kx, dwk[o * w_shape.c + i]);
                }
            }
        }
    }
    dw
}

fn add_bias(out: &mut Tensor, bias: &[f64]) {
    let s = out.shape();
    for n in 0..s.n {
        for (c, &b) in bias.iter().enumerate() {
            if b != 0.0 {
                out.plane_mut(n, c).iter_mut().for_each(|v| *v += b);
            }
        }
    }
}

/// Per-channel sum over batch and space.
pub fn channel_sums(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    (0..s.c)
        .map(|c| (0..s.n).map(|n| t.plane(n, c).iter().sum::<f64>()).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Shape, v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    /// Six nested loops straight from the definition.
    fn direct_conv(x: &Tensor, p: &ConvParams) -> Tensor {
        let xs = x.shape();
        let ws = p.weight.shape();
        let oh = (xs.h + 2 * p.padding - ws.h) / p.stride + 1;
        let ow = (xs.w + 2 * p.padding - ws.w) / p.stride + 1;
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
        for n in 0..xs.n {
            for o in 0..ws.n {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = p.bias[o];
                        for i in 0..ws.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (y * p.stride + ky) as isize - p.padding as isize;
                                    let ix = (xo * p.stride + kx) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                        continue;
                                    }
                                    acc += x.get(n, i, iy as usize, ix as usize)
                                        * p.weight.get(o, i, ky, kx);
                                }
                            }
                        }
                        out.set(n, o, y, xo, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_conv() {
        let x = t(Shape::new(1, 1, 1, 1), &[2.0]);
        let p = ConvParams::new(t(Shape::new(1, 1, 1, 1), &[3.0]), vec![1.0], 1, 0).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().data(), &[7.0]);
    }

    #[test]
    fn basis_weight_selects_channel() {
        let x = t(Shape::new(1, 2, 1, 1), &[1.0, 2.0]);
        let p = ConvParams::new(t(Shape::new(1, 2, 1, 1), &[1.0, 0.0]), vec![0.0], 1, 0).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (2, 0, 3)] {
            let x = Tensor::randn(Shape::new(2, 8, 5, 5), &mut rng);
            let mut p = ConvParams::xavier(4, 8, k, stride, pad, &mut rng);
            p.bias = (0..4).map(|i| i as f64 * 0.1).collect();
            let fast = conv2d(&x, &p).unwrap();
            let slow = direct_conv(&x, &p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let p = ConvParams::zeros(2, 4, 3, 1, 1);
        let err = conv2d(&x, &p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1x3x4x4") && msg.contains("2x4x3x3"), "{msg}");
    }

    #[test]
    fn rejects_kernel_larger_than_input() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let p = ConvParams::zeros(1, 1, 3, 1, 0);
        assert!(matches!(conv2d(&x, &p), Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn deconv_single_pixel_spreads() {
        let x = t(Shape::new(1, 1, 1, 1), &[1.0]);
        let p = ConvParams::new(Tensor::full(Shape::new(1, 1, 2, 2), 1.0), vec![0.0], 2, 0).unwrap();
        let y = deconv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn deconv_stride_two_scatter() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let p = ConvParams::new(t(Shape::new(1, 1, 2, 2), &[1.0, 0.0, 0.0, 0.0]), vec![0.0], 2, 0)
            .unwrap();
        let y = deconv2d(&x, &p).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 0.0, 2.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            3.0, 0.0, 4.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn deconv_equals_conv_adjoint() {
        // deconv2d(y) must equal the input-gradient of conv2d evaluated at y.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, s, pad, h) in [(2, 2, 0, 3), (3, 1, 1, 4), (3, 2, 1, 3)] {
            let p = ConvParams::xavier_transposed(3, 5, k, s, &mut rng);
            let p = ConvParams { padding: pad, ..p };
            let y = Tensor::randn(Shape::new(2, 3, h, h), &mut rng);
            let up = deconv2d(&y, &p).unwrap();
            let conv = ConvParams {
                bias: vec![0.0; 3],
                ..p.clone()
            };
            let x_probe = Tensor::zeros(up.shape());
            let adj = conv2d_backward(&x_probe, &conv, &y).unwrap().input;
            assert_eq!(adj.shape(), up.shape());
            assert!(adj.max_abs_diff(&up) <= 1e-12);
        }
    }

    #[test]
    fn deconv_then_strided_conv_restores_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (h, w) in [(2, 2), (4, 6), (8, 2)] {
            let x = Tensor::randn(Shape::new(1, 2, h, w), &mut rng);
            let up = ConvParams::xavier_transposed(2, 2, 2, 2, &mut rng);
            let down = ConvParams::xavier(2, 2, 1, 2, 0, &mut rng);
            let y = conv2d(&deconv2d(&x, &up).unwrap(), &down).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn pointwise_conv_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(Shape::new(1, 3, 4, 4), &mut rng);
        let p = ConvParams::xavier(5, 3, 1, 1, 0, &mut rng);
        let base = conv2d(&x, &p).unwrap();
        let mut x2 = x.clone();
        x2.set(0, 1, 2, 1, x.get(0, 1, 2, 1) + 0.5);
        let pert = conv2d(&x2, &p).unwrap();
        for o in 0..5 {
            for y in 0..4 {
                for xx in 0..4 {
                    let same = base.get(0, o, y, xx).to_bits() == pert.get(0, o, y, xx).to_bits();
                    assert_eq!(same, (y, xx) != (2, 1));
                }
            }
        }
    }

    #[test]
    fn pointwise_weight_grad_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(Shape::new(2, 3, 2, 3), &mut rng);
        let p = ConvParams::xavier(4, 3, 1, 1, 0, &mut rng);
        let g = Tensor::randn(Shape::new(2, 4, 2, 3), &mut rng);
        let grads = conv2d_backward(&x, &p, &g).unwrap();
        for o in 0..4 {
            for i in 0..3 {
                let mut expect = 0.0;
                for n in 0..2 {
                    for y in 0..2 {
                        for xx in 0..3 {
                            expect += g.get(n, o, y, xx) * x.get(n, i, y, xx);
                        }
                    }
                }
                assert!((grads.weight.get(o, i, 0, 0) - expect).abs() < 1e-12);
            }
        }
    }
}
