//! Ready-made check batteries shared by the command line and the test suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::fusion::{fuse_backward, fuse_cached, FusionParams};
use crate::head::{detection_loss, head_backward, head_forward, HeadParams, RoiTarget};
use crate::mlkp::{mlkp_backward, mlkp_forward_cached, MlkpConfig, MlkpParams};
use crate::oracle::{check_with_reseed, finite_diff_check, kernel_oracle, max_relative_error, predictor_oracle, GradReport, PolynomialPredictor, Probe};
use crate::params::{ParamStore, Parameters};
use crate::roi::{max_roi_pool, max_roi_pool_backward, push_argmax_pattern, Roi};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
const RESEED_ATTEMPTS: usize = 5;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Parameters plus named input tensors, so input gradients are checked too.
struct WithInputs<'a, P> {
    params: &'a P,
    inputs: Vec<(&'static str, &'a Tensor)>,
}

fn store_with_inputs<P: Parameters>(w: WithInputs<'_, P>, grads: &P, input_grads: &[&Tensor]) -> ParamStore {
    let mut store = ParamStore::with_grads(w.params, grads);
    for ((name, t), g) in w.inputs.iter().zip(input_grads) {
        store
            .insert(name, t.shape().dims().to_vec(), t.data().to_vec())
            .expect("input names are distinct from parameter names");
        store.get_mut(name).expect("just inserted").grad.copy_from_slice(g.data());
    }
    store
}

fn input_from(store: &ParamStore, name: &str, shape: Shape) -> Tensor {
    Tensor::from_vec(shape, store.get(name).expect("input entry").value.clone()).expect("matching length")
}

fn load<P: Parameters + Clone>(store: &ParamStore, template: &P) -> P {
    let mut p = template.clone();
    p.visit_mut("", &mut |name, _, v| v.copy_from_slice(&store.get(name).expect("parameter entry").value));
    p
}

/// Loss `sum G^2` of the kernel block on an `(1, c, h, w)` standard-normal input.
pub fn mlkp_gradcheck(cfg: &MlkpConfig, channels: usize, h: usize, w: usize, seed: u64, eps: f64, tolerance: f64) -> Result<GradReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(Shape::new(1, channels, h, w), &mut rng);
    let params = MlkpParams::xavier(cfg, channels, &mut rng);
    let (g, cache) = mlkp_forward_cached(&x, cfg, &params)?;
    let grads = mlkp_backward(&cache, &params, &g.scale(2.0))?;
    let store = store_with_inputs(
        WithInputs {
            params: &params,
            inputs: vec![("input", &x)],
        },
        &grads.params,
        &[&grads.input],
    );
    Ok(finite_diff_check(&store, eps, tolerance, |s| {
        let p = load(s, &params);
        let xi = input_from(s, "input", x.shape());
        let (g, cache) = mlkp_forward_cached(&xi, cfg, &p).expect("shapes fixed");
        let mut pattern = Vec::new();
        cache.push_activation_pattern(&mut pattern);
        Probe {
            value: g.sum_squares(),
            pattern,
        }
    }))
}

/// Fusion of two 4x4 layers with two 2x2 layers into width 4, loss `sum (F * R)^2`.
pub fn fusion_gradcheck(seed: u64, eps: f64, tolerance: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e0 = Tensor::randn(Shape::new(1, 3, 4, 4), &mut rng);
    let e1 = Tensor::randn(Shape::new(1, 2, 4, 4), &mut rng);
    let l0 = Tensor::randn(Shape::new(1, 2, 2, 2), &mut rng);
    let l1 = Tensor::randn(Shape::new(1, 3, 2, 2), &mut rng);
    let mut params = FusionParams::xavier(5, 5, 4, &mut rng);
    params.visit_mut("", &mut |name, _, v| {
        if name.ends_with("bias") {
            v.iter_mut().for_each(|b| *b = StandardNormal.sample(&mut rng));
        }
    });
    let weight = Tensor::randn(Shape::new(1, 4, 2, 2), &mut rng);
    let loss = |out: &Tensor| out.data().iter().zip(weight.data()).map(|(o, r)| (o * r).powi(2)).sum::<f64>();
    let (out, cache) = fuse_cached(&[&e0, &e1], &[&l0, &l1], &params)?;
    let grad_out = Tensor::from_vec(
        out.shape(),
        out.data().iter().zip(weight.data()).map(|(o, r)| 2.0 * o * r * r).collect(),
    )?;
    let grads = fuse_backward(&cache, &params, &grad_out)?;
    let store = store_with_inputs(
        WithInputs {
            params: &params,
            inputs: vec![("earlier.0", &e0), ("earlier.1", &e1), ("later.0", &l0), ("later.1", &l1)],
        },
        &grads.params,
        &[&grads.earlier[0], &grads.earlier[1], &grads.later[0], &grads.later[1]],
    );
    Ok(finite_diff_check(&store, eps, tolerance, |s| {
        let p = load(s, &params);
        let ins = [("earlier.0", &e0), ("earlier.1", &e1), ("later.0", &l0), ("later.1", &l1)].map(|(n, t)| input_from(s, n, t.shape()));
        loss(&fuse_cached(&[&ins[0], &ins[1]], &[&ins[2], &ins[3]], &p).expect("shapes fixed").0)
    }))
}

/// Head plus multi-task loss on six RoIs with mixed labels.
pub fn head_gradcheck(seed: u64, eps: f64, tolerance: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 3;
    let pooled = Tensor::randn(Shape::new(6, 2, 2, 2), &mut rng);
    let mut params = HeadParams::init(8, classes, &mut rng);
    params.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x = 0.5 * normal(&mut rng)));
    let targets: Vec<RoiTarget> = (0..6)
        .map(|i| RoiTarget {
            label: i % (classes + 1),
            deltas: [0; 4].map(|_| StandardNormal.sample(&mut rng)),
        })
        .collect();
    let out = head_forward(&pooled, &params)?;
    let l = detection_loss(&out.logits, &out.deltas, &targets)?;
    let (gx, grads) = head_backward(&pooled, &params, &l.grad_logits, &l.grad_deltas)?;
    let store = store_with_inputs(
        WithInputs {
            params: &params,
            inputs: vec![("pooled", &pooled)],
        },
        &grads,
        &[&gx],
    );
    Ok(finite_diff_check(&store, eps, tolerance, |s| {
        let p = load(s, &params);
        let x = input_from(s, "pooled", pooled.shape());
        let o = head_forward(&x, &p).expect("shapes fixed");
        let l = detection_loss(&o.logits, &o.deltas, &targets).expect("targets fixed");
        // Smooth L1 switches branch at |residual| = 1.
        let pattern = o
            .deltas
            .data()
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let t = &targets[i / (4 * classes)];
                let slot = (i % (4 * classes)) / 4;
                u64::from(t.label == slot + 1 && (d - t.deltas[i % 4]).abs() < 1.0)
            })
            .collect();
        Probe { value: l.loss, pattern }
    }))
}

/// RoI max pooling on a random map, loss `sum (P * R)^2`.
pub fn roi_pool_gradcheck(seed: u64, eps: f64, tolerance: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Tensor::randn(Shape::new(2, 3, 6, 6), &mut rng);
    let rois = [
        Roi::new(0, 0.0, 0.0, 6.0, 6.0),
        Roi::new(1, 1.3, 0.4, 4.9, 3.2),
        Roi::new(0, 2.0, 2.0, 2.5, 5.5),
    ];
    let weight = Tensor::randn(Shape::new(3, 3, 2, 2), &mut rng);
    let out = max_roi_pool(&g, &rois, 2, 2)?;
    let grad_out = Tensor::from_vec(
        weight.shape(),
        out.pooled.data().iter().zip(weight.data()).map(|(p, r)| 2.0 * p * r * r).collect(),
    )?;
    let gx = max_roi_pool_backward(&out, &grad_out)?;
    let mut store = ParamStore::new();
    store.insert("features", g.shape().dims().to_vec(), g.data().to_vec())?;
    store.get_mut("features").expect("inserted").grad.copy_from_slice(gx.data());
    Ok(finite_diff_check(&store, eps, tolerance, |s| {
        let x = input_from(s, "features", g.shape());
        let o = max_roi_pool(&x, &rois, 2, 2).expect("valid rois");
        let mut pattern = Vec::new();
        push_argmax_pattern(&o, &mut pattern);
        Probe {
            value: o.pooled.data().iter().zip(weight.data()).map(|(p, r)| (p * r).powi(2)).sum(),
            pattern,
        }
    }))
}

/// Named reports for the kernel block (`c = 6`, 3x3, `D = 8`), fusion, head and RoI pooling.
pub fn gradcheck_suite(max_order: usize, location_weight: bool, seed: u64, eps: f64, tolerance: f64) -> Result<Vec<(String, GradReport)>> {
    let cfg = MlkpConfig::uniform(max_order, 8, location_weight, 6);
    let mut out = Vec::new();
    let mut err = None;
    let mut run = |name: String, f: &mut dyn FnMut(u64) -> Result<GradReport>| {
        let (report, _) = check_with_reseed(seed, RESEED_ATTEMPTS, |s| match f(s) {
            Ok(r) => r,
            Err(e) => {
                err.get_or_insert(e);
                GradReport {
                    entries: Vec::new(),
                    tolerance,
                    eps,
                }
            }
        });
        out.push((name, report));
    };
    run(format!("mlkp(R={max_order}, location={location_weight})"), &mut |s| mlkp_gradcheck(&cfg, 6, 3, 3, s, eps, tolerance));
    run("fusion".into(), &mut |s| fusion_gradcheck(s, eps, tolerance));
    run("head+loss".into(), &mut |s| head_gradcheck(s, eps, tolerance));
    run("roi_pool".into(), &mut |s| roi_pool_gradcheck(s, eps, tolerance));
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSummary {
    pub trials: usize,
    pub kernel_max_error: [f64; 2],
    pub predictor_max_gap: f64,
}

impl OracleSummary {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.kernel_max_error.iter().all(|&e| e <= tolerance) && self.predictor_max_gap <= tolerance
    }
}

/// Worst relative deviation of the convolutional order maps from the direct
/// kernel evaluation over `trials` draws of `(1, c, h, w)` inputs.
pub fn kernel_oracle_trials(order: usize, trials: usize, channels: usize, rank: usize, h: usize, w: usize, seed: u64) -> Result<f64> {
    let cfg = MlkpConfig::uniform(order, rank, false, channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = Tensor::randn(Shape::new(1, channels, h, w), &mut rng);
        let mut params = MlkpParams::xavier(&cfg, channels, &mut rng);
        params.visit_mut("", &mut |name, _, v| {
            if name.ends_with("bias") {
                v.iter_mut().for_each(|b| *b = 0.1 * normal(&mut rng));
            }
        });
        let fast = crate::mlkp::compute_order_maps(&x, &params, order)?;
        worst = worst.max(max_relative_error(&fast, &kernel_oracle(&x, &params, order)?));
    }
    Ok(worst)
}

/// Worst explicit-versus-factored gap of the polynomial predictor.
pub fn predictor_trials(trials: usize, channels: usize, max_order: usize, rank: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let pred = PolynomialPredictor::random(channels, max_order, rank, &mut rng);
        let x: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(&mut rng)).collect();
        worst = worst.max(predictor_oracle(&x, &pred)?.relative_gap());
    }
    Ok(worst)
}

/// Kernel oracle at `c = 8, D = 16`, 4x4 for orders 2 and 3, and the predictor at `c = 5, R = 3, D = 4`.
pub fn oracle_suite(trials: usize, seed: u64) -> Result<OracleSummary> {
    Ok(OracleSummary {
        trials,
        kernel_max_error: [
            kernel_oracle_trials(2, trials, 8, 16, 4, 4, seed)?,
            kernel_oracle_trials(3, trials, 8, 16, 4, 4, seed.wrapping_add(1))?,
        ],
        predictor_max_gap: predictor_trials(trials, 5, 3, 4, seed.wrapping_add(2))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_settings() {
        for (name, r) in gradcheck_suite(3, true, 1, DEFAULT_EPS, DEFAULT_TOLERANCE).unwrap() {
            assert!(r.passed(), "{name}\n{r}");
        }
    }

    #[test]
    fn oracles_agree() {
        assert!(oracle_suite(5, 3).unwrap().passed(1e-10));
    }
}
