use mlkp::fusion::{fuse, FusionParams};
use mlkp::ops::conv::{conv2d, deconv2d};
use mlkp::ops::pointwise::{concat_channels, sum};
use mlkp::suite::{fusion_gradcheck, DEFAULT_EPS, DEFAULT_TOLERANCE};
use mlkp::{Parameters, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    earlier: Vec<Tensor>,
    later: Vec<Tensor>,
    params: FusionParams,
}

fn case(seed: u64, zero_bias: bool) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, h, w) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
    let width = r.random_range(1..7);
    let earlier: Vec<Tensor> = (0..r.random_range(1..4))
        .map(|_| Tensor::randn(Shape::new(n, r.random_range(1..5), 2 * h, 2 * w), &mut r))
        .collect();
    let later: Vec<Tensor> = (0..r.random_range(1..4))
        .map(|_| Tensor::randn(Shape::new(n, r.random_range(1..5), h, w), &mut r))
        .collect();
    let ce = earlier.iter().map(|t| t.shape().c).sum();
    let cl = later.iter().map(|t| t.shape().c).sum();
    let mut params = FusionParams::xavier(ce, cl, width, &mut r);
    if !zero_bias {
        params.visit_mut("", &mut |name, _, v| {
            if name.ends_with("bias") {
                v.iter_mut().for_each(|b| *b = r.random_range(-1.0..1.0));
            }
        });
    }
    Case { earlier, later, params }
}

fn refs(v: &[Tensor]) -> Vec<&Tensor> {
    v.iter().collect()
}

fn run(c: &Case) -> Tensor {
    fuse(&refs(&c.earlier), &refs(&c.later), &c.params).unwrap()
}

#[test]
fn both_branches_pass_finite_differences() {
    for seed in 50..56 {
        let report = fusion_gradcheck(seed, DEFAULT_EPS, DEFAULT_TOLERANCE).unwrap();
        assert!(report.passed(), "seed {seed}\n{report}");
        for name in ["earlier.0", "earlier.1", "later.0", "later.1"] {
            assert!(report.entry(name).is_some_and(|e| e.coordinates > 0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_has_fusion_width_at_coarse_resolution(seed in any::<u64>()) {
        let c = case(seed, false);
        let out = run(&c);
        let l = c.later[0].shape();
        prop_assert_eq!(out.shape(), Shape::new(l.n, c.params.width(), l.h, l.w));
    }

    #[test]
    fn equals_hand_composed_ops(seed in any::<u64>()) {
        let c = case(seed, false);
        let e = conv2d(&concat_channels(&refs(&c.earlier)).unwrap(), &c.params.earlier_adapter).unwrap();
        let l = conv2d(&concat_channels(&refs(&c.later)).unwrap(), &c.params.later_adapter).unwrap();
        let up = deconv2d(&l, &c.params.upsample).unwrap();
        let reference = conv2d(&sum(&e, &up).unwrap(), &c.params.reduce).unwrap();
        prop_assert!(run(&c).bit_eq(&reference));
    }

    #[test]
    fn linear_in_inputs_without_biases(seed in any::<u64>()) {
        let a = case(seed, true);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let noise = |v: &[Tensor], r: &mut ChaCha8Rng| -> Vec<Tensor> { v.iter().map(|t| Tensor::randn(t.shape(), r)).collect() };
        let b = Case { earlier: noise(&a.earlier, &mut r), later: noise(&a.later, &mut r), params: a.params.clone() };
        let add = |x: &[Tensor], y: &[Tensor]| -> Vec<Tensor> {
            x.iter().zip(y).map(|(p, q)| { let mut s = p.clone(); s.add_assign(q); s }).collect()
        };
        let both = Case { earlier: add(&a.earlier, &b.earlier), later: add(&a.later, &b.later), params: a.params.clone() };
        let mut split = run(&a);
        split.add_assign(&run(&b));
        let joint = run(&both);
        let scale = joint.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
        prop_assert!(joint.max_abs_diff(&split) <= 1e-12 * scale);
    }
}
