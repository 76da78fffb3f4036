//! Max RoI pooling with Fast R-CNN style quantization.
//!
//! A RoI in feature-map coordinates covers cells `floor(y0) .. ceil(y1)` (at
//! least one cell) after clipping. Its `H x W` cell window is split into
//! `pool_h x pool_w` bins; bin `i` covers rows
//! `floor(i * H / pool_h) .. ceil((i + 1) * H / pool_h)` relative to the
//! window start, and is never empty.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub batch_index: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Roi {
    pub fn new(batch_index: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            batch_index,
            x0,
            y0,
            x1,
            y1,
        }
    }

    /// Maps an image-space box onto a feature map with the given stride.
    pub fn from_image_box(batch_index: usize, b: &BBox, stride: f64) -> Self {
        let s = b.scale(1.0 / stride);
        Self::new(batch_index, s.x0, s.y0, s.x1, s.y1)
    }

    /// Corners clipped to `[0, w] x [0, h]` and put in order.
    pub fn clipped(&self, h: usize, w: usize) -> Roi {
        let cx = |v: f64| v.clamp(0.0, w as f64);
        let cy = |v: f64| v.clamp(0.0, h as f64);
        let (x0, x1) = (cx(self.x0.min(self.x1)), cx(self.x0.max(self.x1)));
        let (y0, y1) = (cy(self.y0.min(self.y1)), cy(self.y0.max(self.y1)));
        Roi::new(self.batch_index, x0, y0, x1, y1)
    }

    /// Half-open cell window `(row_start, row_end, col_start, col_end)`.
    pub fn cell_window(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let r = self.clipped(h, w);
        let span = |lo: f64, hi: f64, len: usize| {
            let start = (lo.floor() as usize).min(len - 1);
            let end = (hi.ceil() as usize).clamp(start + 1, len);
            (start, end)
        };
        let (rs, re) = span(r.y0, r.y1, h);
        let (cs, ce) = span(r.x0, r.x1, w);
        (rs, re, cs, ce)
    }
}

/// Half-open range of bin `i` of `bins` over a window of `len` cells.
#[inline]
pub fn bin_range(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins).max(start + 1);
    (start, end)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiPoolOutput {
    /// `(num_rois, channels, pool_h, pool_w)`.
    pub pooled: Tensor,
    /// Flat input index of the maximum behind every output element.
    pub argmax: Vec<usize>,
    pub input_shape: Shape,
}

pub fn max_roi_pool(g: &Tensor, rois: &[Roi], pool_h: usize, pool_w: usize) -> Result<RoiPoolOutput> {
    if pool_h == 0 || pool_w == 0 {
        return Err(Error::InvalidShape {
            op: "max_roi_pool",
            detail: "pool dimensions must be at least 1".into(),
        });
    }
    if rois.is_empty() {
        return Err(Error::InvalidShape {
            op: "max_roi_pool",
            detail: "no RoIs".into(),
        });
    }
    let s = g.shape();
    let out_shape = Shape::new(rois.len(), s.c, pool_h, pool_w);
    let mut pooled = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    for roi in rois {
        if roi.batch_index >= s.n {
            return Err(Error::OutOfRange {
                op: "max_roi_pool",
                detail: format!("batch index {} for a batch of {}", roi.batch_index, s.n),
            });
        }
        let (rs, re, cs, ce) = roi.cell_window(s.h, s.w);
        let bins_y: Vec<_> = (0..pool_h).map(|i| bin_range(i, pool_h, re - rs)).collect();
        let bins_x: Vec<_> = (0..pool_w).map(|j| bin_range(j, pool_w, ce - cs)).collect();
        for c in 0..s.c {
            let base = s.offset(roi.batch_index, c, 0, 0);
            let plane = g.plane(roi.batch_index, c);
            for &(ys, ye) in &bins_y {
                for &(xs, xe) in &bins_x {
                    let first = (rs + ys) * s.w + cs + xs;
                    let (mut best, mut best_idx) = (plane[first], first);
                    for y in rs + ys..rs + ye {
                        for x in cs + xs..cs + xe {
                            let v = plane[y * s.w + x];
                            if v > best {
                                best = v;
                                best_idx = y * s.w + x;
                            }
                        }
                    }
                    let best_idx = base + best_idx;
                    pooled.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok(RoiPoolOutput {
        pooled: Tensor::from_vec(out_shape, pooled)?,
        argmax,
        input_shape: s,
    })
}

/// Routes each pooled gradient to the input cell that produced its maximum.
pub fn max_roi_pool_backward(out: &RoiPoolOutput, grad: &Tensor) -> Result<Tensor> {
    if grad.shape() != out.pooled.shape() {
        return Err(Error::ShapeMismatch {
            op: "max_roi_pool_backward",
            lhs: out.pooled.shape(),
            rhs: grad.shape(),
        });
    }
    let mut g = Tensor::zeros(out.input_shape);
    let data = g.data_mut();
    for (&idx, &v) in out.argmax.iter().zip(grad.data()) {
        data[idx] += v;
    }
    Ok(g)
}

/// Argmax indices as discrete state for finite-difference probes.
pub fn push_argmax_pattern(out: &RoiPoolOutput, pattern: &mut Vec<u64>) {
    pattern.extend(out.argmax.iter().map(|&i| i as u64));
}
