//! Element-wise operations and channel concatenation.
//!
//! Binary operations accept either equal shapes or a right-hand side with a
//! single channel, which is broadcast across every channel of the left-hand
//! side without being materialized.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Product,
    Sum,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Same,
    Broadcast,
}

fn binary_layout(op: &'static str, a: Shape, b: Shape) -> Result<Layout> {
    if a == b {
        Ok(Layout::Same)
    } else if b.c == 1 && a.n == b.n && a.h == b.h && a.w == b.w {
        Ok(Layout::Broadcast)
    } else {
        Err(Error::ShapeMismatch { op, lhs: a, rhs: b })
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let s = a.shape();
    match binary_layout(op, s, b.shape())? {
        Layout::Same => {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(s, data)
        }
        Layout::Broadcast => {
            let mut out = a.clone();
            for n in 0..s.n {
                let weight = b.plane(n, 0);
                for c in 0..s.c {
                    for (v, &m) in out.plane_mut(n, c).iter_mut().zip(weight) {
                        *v = f(*v, m);
                    }
                }
            }
            Ok(out)
        }
    }
}

pub fn product(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("product", a, b, |x, y| x * y)
}

pub fn sum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sum", a, b, |x, y| x + y)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| v.max(0.0))
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Dispatch on [`Pointwise`]; `b` is required for binary operations only.
pub fn pointwise(op: Pointwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (op, b) {
        (Pointwise::Relu, _) => Ok(relu(a)),
        (Pointwise::Product, Some(b)) => product(a, b),
        (Pointwise::Sum, Some(b)) => sum(a, b),
        (_, None) => Err(Error::InvalidShape {
            op: "pointwise",
            detail: format!("{op:?} needs two operands"),
        }),
    }
}

/// Copies a single-channel tensor into `channels` identical channels.
pub fn broadcast_channels(m: &Tensor, channels: usize) -> Result<Tensor> {
    let s = m.shape();
    if s.c != 1 {
        return Err(Error::InvalidShape {
            op: "broadcast_channels",
            detail: format!("expected a single channel, got {s}"),
        });
    }
    let mut out = Tensor::zeros(s.with_channels(channels));
    for n in 0..s.n {
        for c in 0..channels {
            out.plane_mut(n, c).copy_from_slice(m.plane(n, 0));
        }
    }
    Ok(out)
}

/// Sums every channel into one, the adjoint of a channel broadcast.
pub fn reduce_channels(t: &Tensor) -> Tensor {
    let s = t.shape();
    let mut out = Tensor::zeros(s.with_channels(1));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c).to_vec();
            for (d, v) in out.plane_mut(n, 0).iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    out
}

/// Gradients `(grad_a, grad_b)` of `product(a, b)`.
pub fn product_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    match binary_layout("product_backward", a.shape(), b.shape())? {
        Layout::Same => Ok((product(grad, b)?, product(grad, a)?)),
        Layout::Broadcast => {
            let ga = product(grad, b)?;
            let gb = reduce_channels(&product(grad, a)?);
            Ok((ga, gb))
        }
    }
}

pub fn sum_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    match binary_layout("sum_backward", a.shape(), b.shape())? {
        Layout::Same => Ok((grad.clone(), grad.clone())),
        Layout::Broadcast => Ok((grad.clone(), reduce_channels(grad))),
    }
}

/// Gradient of relu given its input. The subgradient at zero is zero.
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    binary("relu_backward", grad, input, |g, x| if x > 0.0 { g } else { 0.0 })
}

/// Gradient of sigmoid given its output.
pub fn sigmoid_backward(output: &Tensor, grad: &Tensor) -> Result<Tensor> {
    binary("sigmoid_backward", grad, output, |g, y| g * y * (1.0 - y))
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        op: "concat_channels",
        detail: "no parts to concatenate".into(),
    })?;
    let base = first.shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if s.n != base.n || s.h != base.h || s.w != base.w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: base,
                rhs: s,
            });
        }
        channels += s.c;
    }
    let shape = base.with_channels(channels);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..base.n {
        for p in parts {
            let s = p.shape();
            let start = s.offset(n, 0, 0, 0);
            data.extend_from_slice(&p.data()[start..start + s.c * s.spatial()]);
        }
    }
    Tensor::from_vec(shape, data)
}

/// Splits a gradient of the concatenation back into per-part gradients.
pub fn concat_backward(channels: &[usize], grad: &Tensor) -> Result<Vec<Tensor>> {
    let total: usize = channels.iter().sum();
    if total != grad.shape().c {
        return Err(Error::InvalidShape {
            op: "concat_backward",
            detail: format!("parts have {total} channels, gradient {}", grad.shape()),
        });
    }
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let part = grad.slice_channels(start, c);
            start += c;
            part
        })
        .collect()
}
