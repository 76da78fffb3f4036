//! Two-block multi-scale feature fusion.
//!
//! Layers of the same backbone block are concatenated along channels and
//! mapped to a common width by a 1x1 adapter. The coarser block is upsampled
//! by a stride-2 transposed convolution, summed with the finer block, and a
//! stride-2 1x1 convolution brings the result back to the coarse resolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvParams};
use crate::ops::pointwise::{concat_backward, concat_channels, sum};
use crate::params::{join, Parameters};
use crate::tensor::Tensor;

/// Which backbone layers feed each fused block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionConfig {
    pub width: usize,
    /// Layer indices within the finer block.
    pub earlier_layers: Vec<usize>,
    /// Layer indices within the coarser block.
    pub later_layers: Vec<usize>,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidConfig("fusion width must be positive".into()));
        }
        if self.earlier_layers.is_empty() || self.later_layers.is_empty() {
            return Err(Error::InvalidConfig(
                "both fused blocks need at least one layer".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub earlier_adapter: ConvParams,
    pub later_adapter: ConvParams,
    /// Transposed convolution, kernel 2, stride 2.
    pub upsample: ConvParams,
    /// 1x1 convolution, stride 2.
    pub reduce: ConvParams,
}

impl FusionParams {
    pub fn xavier<R: Rng + ?Sized>(earlier_channels: usize, later_channels: usize, width: usize, rng: &mut R) -> Self {
        Self {
            earlier_adapter: ConvParams::xavier(width, earlier_channels, 1, 1, 0, rng),
            later_adapter: ConvParams::xavier(width, later_channels, 1, 1, 0, rng),
            upsample: ConvParams::xavier_transposed(width, width, 2, 2, rng),
            reduce: ConvParams::xavier(width, width, 1, 2, 0, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.reduce.weight.shape().n
    }
}

impl Parameters for FusionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.earlier_adapter.visit(&join(prefix, "earlier_adapter"), f);
        self.later_adapter.visit(&join(prefix, "later_adapter"), f);
        self.upsample.visit(&join(prefix, "upsample"), f);
        self.reduce.visit(&join(prefix, "reduce"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.earlier_adapter.visit_mut(&join(prefix, "earlier_adapter"), f);
        self.later_adapter.visit_mut(&join(prefix, "later_adapter"), f);
        self.upsample.visit_mut(&join(prefix, "upsample"), f);
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
    }
}

/// Channel concatenation of one block's layers followed by a 1x1 adapter.
pub fn intra_block_concat(layers: &[&Tensor], adapter: &ConvParams) -> Result<Tensor> {
    let cat = concat_channels(layers)?;
    conv::conv2d(&cat, adapter)
}

fn check_halved(earlier: &Tensor, later: &Tensor) -> Result<()> {
    let (e, l) = (earlier.shape(), later.shape());
    if e.n != l.n || e.c != l.c || e.h != 2 * l.h || e.w != 2 * l.w {
        return Err(Error::InvalidShape {
            op: "cross_block_fuse",
            detail: format!("coarse block {l} must be exactly half of fine block {e} with equal channels"),
        });
    }
    Ok(())
}

/// `reduce(earlier + upsample(later))`, at the resolution of `later`.
pub fn cross_block_fuse(earlier: &Tensor, later: &Tensor, params: &FusionParams) -> Result<Tensor> {
    check_halved(earlier, later)?;
    let up = conv::deconv2d(later, &params.upsample)?;
    let summed = sum(earlier, &up)?;
    conv::conv2d(&summed, &params.reduce)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionCache {
    earlier_channels: Vec<usize>,
    later_channels: Vec<usize>,
    earlier_cat: Tensor,
    later_cat: Tensor,
    later_adapted: Tensor,
    summed: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub earlier: Vec<Tensor>,
    pub later: Vec<Tensor>,
    pub params: FusionParams,
}

/// Full fusion from raw block layers.
pub fn fuse_cached(earlier: &[&Tensor], later: &[&Tensor], params: &FusionParams) -> Result<(Tensor, FusionCache)> {
    let earlier_cat = concat_channels(earlier)?;
    let later_cat = concat_channels(later)?;
    let earlier_adapted = conv::conv2d(&earlier_cat, &params.earlier_adapter)?;
    let later_adapted = conv::conv2d(&later_cat, &params.later_adapter)?;
    check_halved(&earlier_adapted, &later_adapted)?;
    let up = conv::deconv2d(&later_adapted, &params.upsample)?;
    let summed = sum(&earlier_adapted, &up)?;
    let out = conv::conv2d(&summed, &params.reduce)?;
    Ok((
        out,
        FusionCache {
            earlier_channels: earlier.iter().map(|t| t.shape().c).collect(),
            later_channels: later.iter().map(|t| t.shape().c).collect(),
            earlier_cat,
            later_cat,
            later_adapted,
            summed,
        },
    ))
}

pub fn fuse(earlier: &[&Tensor], later: &[&Tensor], params: &FusionParams) -> Result<Tensor> {
    Ok(fuse_cached(earlier, later, params)?.0)
}

pub fn fuse_backward(cache: &FusionCache, params: &FusionParams, grad: &Tensor) -> Result<FusionGrads> {
    let reduce = conv::conv2d_backward(&cache.summed, &params.reduce, grad)?;
    let g_sum = &reduce.input;
    let up = conv::deconv2d_backward(&cache.later_adapted, &params.upsample, g_sum)?;
    let earlier_ad = conv::conv2d_backward(&cache.earlier_cat, &params.earlier_adapter, g_sum)?;
    let later_ad = conv::conv2d_backward(&cache.later_cat, &params.later_adapter, &up.input)?;
    let with = |p: &ConvParams, g: conv::ConvGrads| ConvParams {
        weight: g.weight,
        bias: g.bias,
        ..p.clone()
    };
    Ok(FusionGrads {
        earlier: concat_backward(&cache.earlier_channels, &earlier_ad.input)?,
        later: concat_backward(&cache.later_channels, &later_ad.input)?,
        params: FusionParams {
            earlier_adapter: with(&params.earlier_adapter, earlier_ad),
            later_adapter: with(&params.later_adapter, later_ad),
            upsample: with(&params.upsample, up),
            reduce: with(&params.reduce, reduce),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 1x1 weight copying input channel `i` to output channel `offset + i`.
    fn identity_adapter(c_out: usize, c_in: usize, offset: usize) -> ConvParams {
        let mut p = ConvParams::zeros(c_out, c_in, 1, 1, 0);
        for i in 0..c_in {
            p.weight.set(offset + i, i, 0, 0, 1.0);
        }
        p
    }

    #[test]
    fn identity_adapter_keeps_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::randn(Shape::new(1, 4, 2, 2), &mut rng);
        let b = Tensor::randn(Shape::new(1, 4, 2, 2), &mut rng);
        let out = intra_block_concat(&[&a, &b], &identity_adapter(8, 8, 0)).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 8, 2, 2));
        assert!(out.slice_channels(0, 4).unwrap().bit_eq(&a));
        assert!(out.slice_channels(4, 4).unwrap().bit_eq(&b));
    }

    #[test]
    fn single_layer_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(Shape::new(2, 3, 3, 2), &mut rng);
        let out = intra_block_concat(&[&a], &identity_adapter(3, 3, 0)).unwrap();
        assert!(out.bit_eq(&a));
    }

    #[test]
    fn adapter_sets_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let width = rng.random_range(1..10);
            let parts: Vec<Tensor> = (0..rng.random_range(1..4))
                .map(|_| Tensor::randn(Shape::new(1, rng.random_range(1..6), 3, 3), &mut rng))
                .collect();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let c_in = parts.iter().map(|p| p.shape().c).sum();
            let adapter = ConvParams::xavier(width, c_in, 1, 1, 0, &mut rng);
            assert_eq!(intra_block_concat(&refs, &adapter).unwrap().shape().c, width);
        }
    }

    #[test]
    fn zero_coarse_branch_is_additive_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = FusionParams::xavier(2, 2, 2, &mut rng);
        let earlier = Tensor::randn(Shape::new(1, 2, 4, 4), &mut rng);
        let later = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let fused = cross_block_fuse(&earlier, &later, &params).unwrap();
        let alone = conv::conv2d(&earlier, &params.reduce).unwrap();
        assert!(fused.bit_eq(&alone));
    }

    #[test]
    fn output_has_coarse_resolution() {
        let mut params = FusionParams::xavier(1, 1, 1, &mut ChaCha8Rng::seed_from_u64(4));
        params.upsample.weight = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        params.reduce.weight = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let earlier = Tensor::full(Shape::new(1, 1, 4, 4), 1.0);
        let later = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let out = cross_block_fuse(&earlier, &later, &params).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(out.data(), &[2.0; 4]);
    }

    #[test]
    fn rejects_non_halved_blocks() {
        let params = FusionParams::xavier(1, 1, 1, &mut ChaCha8Rng::seed_from_u64(5));
        let earlier = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let later = Tensor::zeros(Shape::new(1, 1, 3, 2));
        assert!(cross_block_fuse(&earlier, &later, &params).is_err());
    }

    #[test]
    fn matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = FusionParams::xavier(5, 7, 3, &mut rng);
        let e = [
            Tensor::randn(Shape::new(2, 2, 6, 4), &mut rng),
            Tensor::randn(Shape::new(2, 3, 6, 4), &mut rng),
        ];
        let l = [
            Tensor::randn(Shape::new(2, 4, 3, 2), &mut rng),
            Tensor::randn(Shape::new(2, 3, 3, 2), &mut rng),
        ];
        let fused = fuse(&[&e[0], &e[1]], &[&l[0], &l[1]], &params).unwrap();
        let ea = conv::conv2d(&concat_channels(&[&e[0], &e[1]]).unwrap(), &params.earlier_adapter).unwrap();
        let la = conv::conv2d(&concat_channels(&[&l[0], &l[1]]).unwrap(), &params.later_adapter).unwrap();
        let up = conv::deconv2d(&la, &params.upsample).unwrap();
        let manual = conv::conv2d(&sum(&ea, &up).unwrap(), &params.reduce).unwrap();
        assert!(fused.bit_eq(&manual));
    }

    #[test]
    fn linear_without_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = FusionParams::xavier(2, 2, 2, &mut rng);
        let a = Tensor::randn(Shape::new(1, 2, 4, 4), &mut rng);
        let a2 = Tensor::randn(Shape::new(1, 2, 4, 4), &mut rng);
        let b = Tensor::randn(Shape::new(1, 2, 2, 2), &mut rng);
        let mut ab = a.clone();
        ab.add_assign(&a2);
        let lhs = fuse(&[&ab], &[&b], &params).unwrap();
        let mut rhs = fuse(&[&a], &[&b], &params).unwrap();
        rhs.add_assign(&fuse(&[&a2], &[&Tensor::zeros(b.shape())], &params).unwrap());
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
