//! Recorded operation instances: run an op forward once, then ask for the
//! adjoint of that exact evaluation.

use super::conv::{self, ConvParams};
use super::pointwise::{self, Pointwise};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum OpKind {
    Conv2d(ConvParams),
    Deconv2d(ConvParams),
    Pointwise(Pointwise),
    Concat,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d(_) => "conv2d",
            OpKind::Deconv2d(_) => "deconv2d",
            OpKind::Pointwise(Pointwise::Product) => "product",
            OpKind::Pointwise(Pointwise::Sum) => "sum",
            OpKind::Pointwise(Pointwise::Relu) => "relu",
            OpKind::Concat => "concat_channels",
        }
    }
}

/// Gradients of one recorded op, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct OpGrads {
    pub inputs: Vec<Tensor>,
    /// Weight and bias gradients for convolution ops.
    pub params: Option<(Tensor, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct OpRecord {
    kind: OpKind,
    inputs: Option<Vec<Tensor>>,
}

impl OpRecord {
    pub fn new(kind: OpKind) -> Self {
        Self { kind, inputs: None }
    }

    pub fn kind(&self) -> &OpKind {
        &self.kind
    }

    pub fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let arity_err = |want: &str| Error::InvalidShape {
            op: self.kind.name(),
            detail: format!("expected {want} input(s), got {}", inputs.len()),
        };
        let out = match &self.kind {
            OpKind::Conv2d(p) => match inputs {
                [x] => conv::conv2d(x, p)?,
                _ => return Err(arity_err("1")),
            },
            OpKind::Deconv2d(p) => match inputs {
                [x] => conv::deconv2d(x, p)?,
                _ => return Err(arity_err("1")),
            },
            OpKind::Pointwise(Pointwise::Relu) => match inputs {
                [x] => pointwise::relu(x),
                _ => return Err(arity_err("1")),
            },
            OpKind::Pointwise(op) => match inputs {
                [a, b] => pointwise::pointwise(*op, a, Some(b))?,
                _ => return Err(arity_err("2")),
            },
            OpKind::Concat => pointwise::concat_channels(inputs)?,
        };
        self.inputs = Some(inputs.iter().map(|t| (*t).clone()).collect());
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Tensor) -> Result<OpGrads> {
        let inputs = self.inputs.as_ref().ok_or(Error::BackwardBeforeForward {
            op: self.kind.name(),
        })?;
        Ok(match &self.kind {
            OpKind::Conv2d(p) => {
                let g = conv::conv2d_backward(&inputs[0], p, grad_out)?;
                OpGrads {
                    inputs: vec![g.input],
                    params: Some((g.weight, g.bias)),
                }
            }
            OpKind::Deconv2d(p) => {
                let g = conv::deconv2d_backward(&inputs[0], p, grad_out)?;
                OpGrads {
                    inputs: vec![g.input],
                    params: Some((g.weight, g.bias)),
                }
            }
            OpKind::Pointwise(Pointwise::Relu) => OpGrads {
                inputs: vec![pointwise::relu_backward(&inputs[0], grad_out)?],
                params: None,
            },
            OpKind::Pointwise(Pointwise::Product) => {
                let (ga, gb) = pointwise::product_backward(&inputs[0], &inputs[1], grad_out)?;
                OpGrads {
                    inputs: vec![ga, gb],
                    params: None,
                }
            }
            OpKind::Pointwise(Pointwise::Sum) => {
                let (ga, gb) = pointwise::sum_backward(&inputs[0], &inputs[1], grad_out)?;
                OpGrads {
                    inputs: vec![ga, gb],
                    params: None,
                }
            }
            OpKind::Concat => {
                let channels: Vec<usize> = inputs.iter().map(|t| t.shape().c).collect();
                OpGrads {
                    inputs: pointwise::concat_backward(&channels, grad_out)?,
                    params: None,
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn backward_before_forward_is_rejected() {
        let rec = OpRecord::new(OpKind::Pointwise(Pointwise::Product));
        let g = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(matches!(
            rec.backward(&g),
            Err(Error::BackwardBeforeForward { op: "product" })
        ));
    }

    #[test]
    fn wrong_arity_is_rejected() {
        let mut rec = OpRecord::new(OpKind::Pointwise(Pointwise::Sum));
        let a = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(rec.forward(&[&a]).is_err());
    }
}
