//! Linear classification and box-regression head with the multi-task loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{join, Parameters};
use crate::tensor::{Shape, Tensor};

/// Dense layer `y = W x + b` with `W` stored row-major as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_features: usize,
}

impl Linear {
    pub fn zeros(out_features: usize, in_features: usize) -> Self {
        Self {
            weight: vec![0.0; out_features * in_features],
            bias: vec![0.0; out_features],
            in_features,
        }
    }

    pub fn normal<R: Rng + ?Sized>(out_features: usize, in_features: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: (0..out_features * in_features).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_features],
            in_features,
        }
    }

    pub fn out_features(&self) -> usize {
        self.bias.len()
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_features..(o + 1) * self.in_features]
    }

    /// Applies the layer to every row of `x`, a flat `(rows, in)` matrix.
    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let out = self.out_features();
        let mut y = Vec::with_capacity(rows * out);
        for r in 0..rows {
            let xr = &x[r * self.in_features..(r + 1) * self.in_features];
            for o in 0..out {
                let dot: f64 = self.row(o).iter().zip(xr).map(|(w, v)| w * v).sum();
                y.push(self.bias[o] + dot);
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grads` and input gradients into `gx`.
    fn backward(&self, x: &[f64], rows: usize, gy: &[f64], grads: &mut Linear, gx: &mut [f64]) {
        let (inf, out) = (self.in_features, self.out_features());
        for r in 0..rows {
            let xr = &x[r * inf..(r + 1) * inf];
            let gxr = &mut gx[r * inf..(r + 1) * inf];
            for o in 0..out {
                let g = gy[r * out + o];
                if g == 0.0 {
                    continue;
                }
                grads.bias[o] += g;
                let gw = &mut grads.weight[o * inf..(o + 1) * inf];
                for ((gwi, &xi), (gxi, &wi)) in gw.iter_mut().zip(xr).zip(gxr.iter_mut().zip(self.row(o))) {
                    *gwi += g * xi;
                    *gxi += g * wi;
                }
            }
        }
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "weight"), &[self.out_features(), self.in_features], &self.weight);
        f(&join(prefix, "bias"), &[self.out_features()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let dims = [self.out_features(), self.in_features];
        f(&join(prefix, "weight"), &dims, &mut self.weight);
        f(&join(prefix, "bias"), &[dims[0]], &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `num_classes + 1` outputs, index 0 is background.
    pub cls: Linear,
    /// `4 * num_classes` outputs, four per foreground class.
    pub bbox: Linear,
}

impl HeadParams {
    pub fn zeros(in_features: usize, num_classes: usize) -> Self {
        Self {
            cls: Linear::zeros(num_classes + 1, in_features),
            bbox: Linear::zeros(4 * num_classes, in_features),
        }
    }

    pub fn init<R: Rng + ?Sized>(in_features: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            cls: Linear::normal(num_classes + 1, in_features, 0.01, rng),
            bbox: Linear::normal(4 * num_classes, in_features, 0.001, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cls.out_features() - 1
    }

    pub fn in_features(&self) -> usize {
        self.cls.in_features
    }
}

impl Parameters for HeadParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.cls.visit(&join(prefix, "cls"), f);
        self.bbox.visit(&join(prefix, "bbox"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.bbox.visit_mut(&join(prefix, "bbox"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `(rois, num_classes + 1, 1, 1)`.
    pub logits: Tensor,
    /// `(rois, 4 * num_classes, 1, 1)`.
    pub deltas: Tensor,
}

fn check_input(pooled: &Tensor, params: &HeadParams) -> Result<()> {
    let s = pooled.shape();
    if s.c * s.h * s.w != params.in_features() {
        return Err(Error::InvalidShape {
            op: "head_forward",
            detail: format!(
                "pooled features {s} flatten to {} but the head expects {}",
                s.c * s.h * s.w,
                params.in_features()
            ),
        });
    }
    Ok(())
}

pub fn head_forward(pooled: &Tensor, params: &HeadParams) -> Result<HeadOutput> {
    check_input(pooled, params)?;
    let rows = pooled.shape().n;
    let logits = params.cls.forward(pooled.data(), rows);
    let deltas = params.bbox.forward(pooled.data(), rows);
    Ok(HeadOutput {
        logits: Tensor::from_vec(Shape::new(rows, params.cls.out_features(), 1, 1), logits)?,
        deltas: Tensor::from_vec(Shape::new(rows, params.bbox.out_features(), 1, 1), deltas)?,
    })
}

/// Returns the pooled-feature gradient and the parameter gradients.
pub fn head_backward(
    pooled: &Tensor,
    params: &HeadParams,
    grad_logits: &Tensor,
    grad_deltas: &Tensor,
) -> Result<(Tensor, HeadParams)> {
    check_input(pooled, params)?;
    let rows = pooled.shape().n;
    let expect_l = Shape::new(rows, params.cls.out_features(), 1, 1);
    let expect_d = Shape::new(rows, params.bbox.out_features(), 1, 1);
    for (op, expect, got) in [("head_backward.logits", expect_l, grad_logits.shape()), ("head_backward.deltas", expect_d, grad_deltas.shape())] {
        if expect != got {
            return Err(Error::ShapeMismatch { op, lhs: expect, rhs: got });
        }
    }
    let mut grads = HeadParams::zeros(params.in_features(), params.num_classes());
    let mut gx = Tensor::zeros(pooled.shape());
    params.cls.backward(pooled.data(), rows, grad_logits.data(), &mut grads.cls, gx.data_mut());
    params.bbox.backward(pooled.data(), rows, grad_deltas.data(), &mut grads.bbox, gx.data_mut());
    Ok((gx, grads))
}

/// Supervision for one RoI. `label == 0` is background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    pub label: usize,
    pub deltas: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
    pub grad_logits: Tensor,
    pub grad_deltas: Tensor,
}

pub const REGRESSION_WEIGHT: f64 = 1.0;

/// Smooth L1 with transition at 1 and its derivative.
fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Softmax cross-entropy averaged over RoIs plus smooth L1 on the deltas of
/// each positive RoI's own class, divided by the number of RoIs.
pub fn detection_loss(logits: &Tensor, deltas: &Tensor, targets: &[RoiTarget]) -> Result<LossOutput> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::InvalidShape {
            op: "detection_loss",
            detail: "no RoIs".into(),
        });
    }
    let (ls, ds) = (logits.shape(), deltas.shape());
    if ls.n != n || ds.n != n || ls.h * ls.w != 1 || ds.h * ds.w != 1 || ls.c < 2 || ds.c != 4 * (ls.c - 1) {
        return Err(Error::ShapeMismatch {
            op: "detection_loss",
            lhs: ls,
            rhs: ds,
        });
    }
    let k1 = ls.c;
    let inv_n = 1.0 / n as f64;
    let mut grad_logits = Tensor::zeros(ls);
    let mut grad_deltas = Tensor::zeros(ds);
    let (mut ce, mut reg) = (0.0, 0.0);
    for (r, t) in targets.iter().enumerate() {
        if t.label >= k1 {
            return Err(Error::OutOfRange {
                op: "detection_loss",
                detail: format!("label {} with {} classes", t.label, k1 - 1),
            });
        }
        let row = &logits.data()[r * k1..(r + 1) * k1];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        ce += log_z - row[t.label];
        let g = &mut grad_logits.data_mut()[r * k1..(r + 1) * k1];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *gj = (p - if j == t.label { 1.0 } else { 0.0 }) * inv_n;
        }
        if t.label > 0 {
            let base = r * ds.c + 4 * (t.label - 1);
            for k in 0..4 {
                let (l, d) = smooth_l1(deltas.data()[base + k] - t.deltas[k]);
                reg += l;
                grad_deltas.data_mut()[base + k] = REGRESSION_WEIGHT * d * inv_n;
            }
        }
    }
    let classification = ce * inv_n;
    let regression = reg * inv_n;
    Ok(LossOutput {
        loss: classification + REGRESSION_WEIGHT * regression,
        classification,
        regression,
        grad_logits,
        grad_deltas,
    })
}
