//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use mlkp::archive::{load_params, load_weights, save_weights, to_bytes};
use mlkp::config::RunConfig;
use mlkp::mlkp::{mlkp_forward, MlkpConfig, MlkpParams};
use mlkp::model::DetectorParams;
use mlkp::roi::{max_roi_pool, Roi};
use mlkp::suite::{gradcheck_suite, kernel_oracle_trials, predictor_trials, DEFAULT_EPS, DEFAULT_TOLERANCE};
use mlkp::train::{evaluate, mean_loss, train, TrainOutcome};
use mlkp::{ParamStore, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn kernel_oracle() -> Verdict {
    let start = Instant::now();
    let errs: Vec<f64> = [2, 3]
        .iter()
        .map(|&r| kernel_oracle_trials(r, 50, 8, 16, 4, 4, 100 + r as u64).expect("oracle runs"))
        .collect();
    let t = start.elapsed();
    verdict(
        errs.iter().all(|&e| e <= 1e-10) && within(t, 10.0),
        format!("max rel err r=2 {:.3e}, r=3 {:.3e}; {:.2} s", errs[0], errs[1], t.as_secs_f64()),
    )
}

fn predictor_equivalence() -> Verdict {
    let start = Instant::now();
    let gap = predictor_trials(100, 5, 3, 4, 7).expect("predictor runs");
    let t = start.elapsed();
    verdict(gap <= 1e-10 && within(t, 5.0), format!("max rel gap {gap:.3e}; {:.2} s", t.as_secs_f64()))
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let reports = gradcheck_suite(3, true, 11, DEFAULT_EPS, DEFAULT_TOLERANCE).expect("gradcheck runs");
    let t = start.elapsed();
    let mut ok = within(t, 60.0);
    let mut parts = Vec::new();
    for (name, r) in &reports {
        ok &= r.passed();
        parts.push(format!("{name} {:.2e} ({} probes, {} skipped)", r.max_error(), r.probes(), r.skipped()));
    }
    let mlkp = &reports[0].1;
    let covered = mlkp.entry("input").is_some()
        && mlkp.entries.iter().any(|e| e.name.starts_with("order3.slot2"))
        && mlkp.entries.iter().any(|e| e.name.starts_with("location."));
    ok &= covered;
    verdict(ok, format!("{}; {:.2} s", parts.join(", "), t.as_secs_f64()))
}

fn random_config(rng: &mut ChaCha8Rng) -> MlkpConfig {
    let max_order = rng.random_range(1..=3);
    let ranks = (2..=max_order).map(|_| rng.random_range(1..=12)).collect();
    MlkpConfig::new(max_order, ranks, rng.random_bool(0.5), rng.random_range(1..=4)).expect("valid config")
}

fn shape_contract() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = vec![(MlkpConfig::uniform(3, 4096, true, 8), Shape::new(1, 8, 3, 3))];
    while cases.len() < 20 {
        let c = rng.random_range(1..=10);
        let s = Shape::new(rng.random_range(1..=2), c, rng.random_range(1..=7), rng.random_range(1..=7));
        cases.push((random_config(&mut rng), s));
    }
    let mut failures = Vec::new();
    for (cfg, s) in &cases {
        let x = Tensor::randn(*s, &mut rng);
        let params = MlkpParams::xavier(cfg, s.c, &mut rng);
        let g = mlkp_forward(&x, cfg, &params).expect("forward");
        let expected = s.c + cfg.ranks.iter().sum::<usize>();
        let gs = g.shape();
        let raw_kept = x.bit_eq(&g.slice_channels(0, s.c).expect("prefix"));
        if gs.n != s.n || gs.c != expected || gs.h != s.h || gs.w != s.w || !raw_kept {
            failures.push(format!("R={} ranks={:?} on {s} gave {gs}", cfg.max_order, cfg.ranks));
        }
    }
    let default_extra = cases[0].0.output_channels(8) - 8;
    verdict(
        failures.is_empty() && default_extra == 8192,
        if failures.is_empty() {
            format!("20 configs, R=3 D=4096 adds {default_extra} channels")
        } else {
            failures.join("; ")
        },
    )
}

/// Half-open cell window of a RoI, recomputed from the quantization rule.
fn window(roi: &Roi, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let axis = |a: f64, b: f64, len: usize| {
        let lo = a.min(b).clamp(0.0, len as f64);
        let hi = a.max(b).clamp(0.0, len as f64);
        let start = (lo.floor() as usize).min(len - 1);
        let end = ((hi.ceil() as usize).max(start + 1)).min(len);
        (start, end)
    };
    let (rs, re) = axis(roi.y0, roi.y1, h);
    let (cs, ce) = axis(roi.x0, roi.x1, w);
    (rs, re, cs, ce)
}

fn random_roi(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Roi {
    let mut coord = |len: usize| rng.random_range(-1.5..len as f64 + 1.5);
    let (x0, x1, y0, y1) = (coord(w), coord(w), coord(h), coord(h));
    Roi::new(rng.random_range(0..n), x0, y0, x1, y1)
}

fn location_retention() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut pool_ok = 0;
    for _ in 0..100 {
        let s = Shape::new(rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(2..=10), rng.random_range(2..=10));
        let g = Tensor::randn(s, &mut rng);
        let roi = random_roi(&mut rng, s.n, s.h, s.w);
        let (ph, pw) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (rs, re, cs, ce) = window(&roi, s.h, s.w);
        let mut perturbed = g.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let inside = n == roi.batch_index && (rs..re).contains(&y) && (cs..ce).contains(&x);
                        if !inside {
                            perturbed.set(n, c, y, x, 100.0 + rng.random_range(0.0..10.0));
                        }
                    }
                }
            }
        }
        let a = max_roi_pool(&g, &[roi], ph, pw).expect("pool");
        let b = max_roi_pool(&perturbed, &[roi], ph, pw).expect("pool");
        pool_ok += usize::from(a.pooled.bit_eq(&b.pooled));
    }

    let mut field_ok = [0usize; 2];
    for trial in 0..200 {
        let weighted = trial % 2 == 0;
        let c = rng.random_range(2..=6);
        let s = Shape::new(1, c, rng.random_range(3..=8), rng.random_range(3..=8));
        let r = rng.random_range(2..=3);
        let cfg = MlkpConfig::uniform(r, rng.random_range(2..=6), weighted, c);
        let params = MlkpParams::xavier(&cfg, c, &mut rng);
        let x = Tensor::randn(s, &mut rng);
        let (py, px) = (rng.random_range(0..s.h), rng.random_range(0..s.w));
        let mut xp = x.clone();
        for ch in 0..c {
            xp.set(0, ch, py, px, x.get(0, ch, py, px) + rng.random_range(0.5..2.0));
        }
        let g0 = mlkp_forward(&x, &cfg, &params).expect("forward");
        let g1 = mlkp_forward(&xp, &cfg, &params).expect("forward");
        let reach = usize::from(weighted);
        let mut ok = true;
        let mut changed_at_center = false;
        for ch in 0..g0.shape().c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let same = g0.get(0, ch, y, x).to_bits() == g1.get(0, ch, y, x).to_bits();
                    let near = y.abs_diff(py) <= reach && x.abs_diff(px) <= reach;
                    if !near && !same {
                        ok = false;
                    }
                    if y == py && x == px && !same {
                        changed_at_center = true;
                    }
                }
            }
        }
        field_ok[usize::from(weighted)] += usize::from(ok && changed_at_center);
    }
    verdict(
        pool_ok == 100 && field_ok == [100, 100],
        format!(
            "pooled unchanged {pool_ok}/100, receptive field weight off {}/100, weight on {}/100",
            field_ok[0], field_ok[1]
        ),
    )
}

/// Per-cell max by scanning the whole map for cells inside each bin.
fn exhaustive_pool(g: &Tensor, roi: &Roi, ph: usize, pw: usize) -> Vec<f64> {
    let s = g.shape();
    let (rs, re, cs, ce) = window(roi, s.h, s.w);
    let (hh, ww) = ((re - rs) as f64, (ce - cs) as f64);
    let bin = |i: usize, bins: usize, len: f64, origin: usize| {
        let lo = (i as f64 * len / bins as f64).floor() as usize;
        let hi = (((i + 1) as f64 * len / bins as f64).ceil() as usize).max(lo + 1);
        (origin + lo, origin + hi)
    };
    let mut out = Vec::new();
    for c in 0..s.c {
        for i in 0..ph {
            for j in 0..pw {
                let (y0, y1) = bin(i, ph, hh, rs);
                let (x0, x1) = bin(j, pw, ww, cs);
                let mut best = f64::NEG_INFINITY;
                for y in 0..s.h {
                    for x in 0..s.w {
                        if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                            best = best.max(g.get(roi.batch_index, c, y, x));
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

fn roi_pool_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = 0;
    for _ in 0..200 {
        let s = Shape::new(rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=12), rng.random_range(1..=12));
        let g = Tensor::randn(s, &mut rng);
        let roi = random_roi(&mut rng, s.n, s.h, s.w);
        let (ph, pw) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let got = max_roi_pool(&g, &[roi], ph, pw).expect("pool");
        let want = exhaustive_pool(&g, &roi, ph, pw);
        let same = got.pooled.data().iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
        exact += usize::from(same && got.pooled.data().len() == want.len());
    }
    verdict(exact == 200, format!("{exact}/200 exact"))
}

struct ToyRun {
    outcome: TrainOutcome,
    map: f64,
    ratio: f64,
    seconds: f64,
}

fn toy_run(cfg: &RunConfig) -> ToyRun {
    let start = Instant::now();
    let outcome = train(&cfg.model, &cfg.train, &cfg.data, |_| {}).expect("training runs");
    let map = match outcome.final_map {
        Some(m) => m,
        None => evaluate(&cfg.model, &outcome.params, &cfg.data, &cfg.train, &Default::default())
            .expect("evaluation runs")
            .report
            .map,
    };
    let n = outcome.losses.len();
    let ratio = mean_loss(&outcome.losses, n - 9, n) / mean_loss(&outcome.losses, 1, 10);
    ToyRun {
        outcome,
        map,
        ratio,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn end_to_end(cfg: &RunConfig, high: &ToyRun) -> Verdict {
    let base = toy_run(&cfg.first_order_baseline());
    let total = high.seconds + base.seconds;
    verdict(
        high.ratio < 0.2 && high.map >= 0.85 && high.map > base.map && total < 900.0,
        format!(
            "R=3 loss ratio {:.4}, mAP {:.4}; R=1 loss ratio {:.4}, mAP {:.4}; {:.1} s",
            high.ratio, high.map, base.ratio, base.map, total
        ),
    )
}

fn determinism(cfg: &RunConfig, first: &TrainOutcome) -> Verdict {
    let second = train(&cfg.model, &cfg.train, &cfg.data, |_| {}).expect("training runs");
    let a = to_bytes(&ParamStore::from_params(&first.params));
    let b = to_bytes(&ParamStore::from_params(&second.params));
    let rerun_identical = a == b && first.losses.iter().zip(&second.losses).all(|(x, y)| x.to_bits() == y.to_bits());

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("weights.bin");
    save_weights(&ParamStore::from_params(&first.params), &path).expect("save");
    let file_identical = std::fs::read(&path).expect("read back") == a;
    let reloaded = to_bytes(&load_weights(&path).expect("load"));
    let mut fresh = DetectorParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(999)).expect("init");
    load_params(&path, &mut fresh).expect("load into model");
    let params_identical = fresh == first.params;
    verdict(
        rerun_identical && file_identical && reloaded == a && params_identical,
        format!(
            "rerun identical {rerun_identical}, saved bytes identical {file_identical}, reload identical {}, parameters identical {params_identical}; {} bytes",
            reloaded == a,
            a.len()
        ),
    )
}

fn report(id: usize, name: &str, v: &Verdict) -> bool {
    let status = if v.passed { "PASS" } else { "FAIL" };
    println!("criterion {id} {name}: {status} ({})", v.detail);
    v.passed
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report(1, "kernel oracle", &kernel_oracle());
    all &= report(2, "predictor equivalence", &predictor_equivalence());
    all &= report(3, "gradients", &gradients());
    all &= report(4, "shape contract", &shape_contract());
    all &= report(5, "location retention", &location_retention());
    all &= report(6, "roi pool oracle", &roi_pool_oracle());

    let cfg = RunConfig::default();
    let high = toy_run(&cfg);
    all &= report(7, "toy end to end", &end_to_end(&cfg, &high));
    all &= report(8, "determinism and serialization", &determinism(&cfg, &high.outcome));

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
