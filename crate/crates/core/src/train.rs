//! SGD training of the toy detector on synthetic scenes, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::detect::{evaluate_map, Detection, GroundTruth, MapReport};
use crate::error::{Error, Result};
use crate::head::{detection_loss, RoiTarget};
use crate::model::{detect, detector_backward, detector_forward, normalize_image, DetectSettings, DetectorConfig, DetectorParams, BOX_DELTA_STDS};
use crate::params::Parameters;
use crate::roi::Roi;
use crate::synth::{generate_proposals, generate_scene, Proposal, ProposalSpec, Scene, SceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    /// Iterations between learning-rate decays; 0 disables decay.
    pub lr_decay_step: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub rois_per_image: usize,
    pub background_fraction: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Iterations between evaluation log lines; 0 logs once at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            base_lr: 0.01,
            lr_decay_step: 1500,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 42,
            rois_per_image: 32,
            background_fraction: 0.75,
            train_scenes: 500,
            eval_scenes: 100,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.lr_decay_factor > 0.0) {
            return bad("weight_decay must be >= 0 and lr_decay_factor > 0");
        }
        if self.rois_per_image == 0 || !(0.0..=1.0).contains(&self.background_fraction) {
            return bad("rois_per_image must be positive and background_fraction in [0, 1]");
        }
        if self.train_scenes == 0 {
            return bad("train_scenes must be positive");
        }
        Ok(())
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        match self.lr_decay_step {
            0 => self.base_lr,
            step => self.base_lr * self.lr_decay_factor.powi((iteration / step) as i32),
        }
    }
}

/// Momentum SGD with `v = mu v + lr (g + wd w)`, `w -= v`; decay touches weights only.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let mut flat: Vec<Vec<f64>> = Vec::new();
        grads.visit("", &mut |_, _, g| flat.push(g.to_vec()));
        if self.velocity.is_empty() {
            self.velocity = flat.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        let mut i = 0;
        params.visit_mut("", &mut |name, _, w| {
            let decay = if name.ends_with("weight") { wd } else { 0.0 };
            for ((wj, &gj), vj) in w.iter_mut().zip(&flat[i]).zip(self.velocity[i].iter_mut()) {
                *vj = mu * *vj + lr * (gj + decay * *wj);
                *wj -= *vj;
            }
            i += 1;
        });
    }
}

/// Proposal sampler settings used during training for a given scene spec.
pub fn train_proposal_spec(det: &DetectorConfig, data: &SceneSpec, train: &TrainConfig) -> ProposalSpec {
    ProposalSpec {
        positives_per_gt: 8,
        negatives: train.rois_per_image,
        feature_stride: det.feature_stride(),
        min_size: data.min_size,
        max_size: data.max_size,
        seed: train.seed,
        ..ProposalSpec::default()
    }
}

/// Fixed proposals for held-out evaluation.
pub fn eval_proposal_spec(det: &DetectorConfig, data: &SceneSpec) -> ProposalSpec {
    ProposalSpec {
        positives_per_gt: 4,
        negatives: 24,
        feature_stride: det.feature_stride(),
        min_size: data.min_size,
        max_size: data.max_size,
        seed: data.seed ^ 0xE7A1,
        ..ProposalSpec::default()
    }
}

/// Keeps up to `(1 - background_fraction)` foreground RoIs and fills the rest with background.
fn sample_minibatch(props: Vec<Proposal>, train: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Proposal> {
    let (mut fg, mut bg): (Vec<_>, Vec<_>) = props.into_iter().partition(|p| p.target.label > 0);
    fg.shuffle(rng);
    bg.shuffle(rng);
    let max_fg = ((1.0 - train.background_fraction) * train.rois_per_image as f64).round() as usize;
    fg.truncate(max_fg);
    bg.truncate(train.rois_per_image - fg.len());
    fg.extend(bg);
    fg
}

fn normalized_targets(props: &[Proposal]) -> Vec<RoiTarget> {
    props
        .iter()
        .map(|p| RoiTarget {
            label: p.target.label,
            deltas: [0, 1, 2, 3].map(|i| p.target.deltas[i] / BOX_DELTA_STDS[i]),
        })
        .collect()
}

/// Loss, its parts and gradients for one scene and its RoIs.
pub fn scene_step(
    det: &DetectorConfig,
    params: &DetectorParams,
    scene: &Scene,
    props: &[Proposal],
) -> Result<(f64, DetectorParams)> {
    let rois: Vec<Roi> = props.iter().map(|p| p.roi).collect();
    let targets = normalized_targets(props);
    let (out, cache) = detector_forward(det, params, &normalize_image(&scene.image), &rois)?;
    let loss = detection_loss(&out.logits, &out.deltas, &targets)?;
    let grads = detector_backward(det, params, &cache, &loss.grad_logits, &loss.grad_deltas)?;
    Ok((loss.loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: DetectorParams,
    /// Loss at every iteration, first entry is iteration 1.
    pub losses: Vec<f64>,
    pub log: Vec<String>,
    pub final_map: Option<f64>,
}

/// Mean of the losses of iterations `from..=to` (1-based, clamped).
pub fn mean_loss(losses: &[f64], from: usize, to: usize) -> f64 {
    let to = to.min(losses.len());
    let from = from.clamp(1, to.max(1));
    let w = &losses[from - 1..to];
    if w.is_empty() {
        f64::NAN
    } else {
        w.iter().sum::<f64>() / w.len() as f64
    }
}

const LOSS_WINDOW: usize = 10;

pub fn format_log_line(iteration: usize, loss: f64, map50: f64) -> String {
    format!("iter={iteration} loss={loss:.6} map50={map50:.6}")
}

/// Trains from a fresh initialization seeded by `train.seed`.
pub fn train(
    det: &DetectorConfig,
    train: &TrainConfig,
    data: &SceneSpec,
    mut on_log: impl FnMut(&str),
) -> Result<TrainOutcome> {
    det.validate()?;
    train.validate()?;
    data.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut params = DetectorParams::init(det, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(1);
    let prop_spec = train_proposal_spec(det, data, train);
    let mut sgd = Sgd::new(train.momentum, train.weight_decay);
    let mut order: Vec<u64> = Vec::new();
    let mut losses = Vec::with_capacity(train.iterations);
    let mut log = Vec::new();
    let mut final_map = None;

    for it in 0..train.iterations {
        if order.is_empty() {
            order = (0..train.train_scenes as u64).collect();
            order.shuffle(&mut rng);
        }
        let index = order.pop().expect("refilled above");
        let scene = generate_scene(data, index)?;
        let props = sample_minibatch(generate_proposals(&scene, &prop_spec, it as u64), train, &mut rng);
        if props.is_empty() {
            losses.push(losses.last().copied().unwrap_or(0.0));
            continue;
        }
        let (loss, grads) = scene_step(det, &params, &scene, &props)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it + 1, value: loss });
        }
        losses.push(loss);
        sgd.step(&mut params, &grads, train.learning_rate(it));

        let n = it + 1;
        let at_eval = (train.eval_every > 0 && n % train.eval_every == 0) || n == train.iterations;
        if at_eval && train.eval_scenes > 0 {
            let map = evaluate(det, &params, data, train, &DetectSettings::default())?.report.map;
            let line = format_log_line(n, mean_loss(&losses, n.saturating_sub(LOSS_WINDOW - 1), n), map);
            on_log(&line);
            log.push(line);
            if n == train.iterations {
                final_map = Some(map);
            }
        }
    }
    Ok(TrainOutcome {
        params,
        losses,
        log,
        final_map,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MapReport,
    /// Detections per held-out scene, in scene order.
    pub detections: Vec<Vec<Detection>>,
    pub scene_indices: Vec<u64>,
}

/// Scene indices reserved for evaluation.
pub fn eval_indices(train: &TrainConfig) -> std::ops::Range<u64> {
    let start = train.train_scenes as u64;
    start..start + train.eval_scenes as u64
}

/// Detections and mAP@0.5 on the held-out scenes.
pub fn evaluate(
    det: &DetectorConfig,
    params: &DetectorParams,
    data: &SceneSpec,
    train: &TrainConfig,
    settings: &DetectSettings,
) -> Result<Evaluation> {
    let spec = eval_proposal_spec(det, data);
    let mut detections = Vec::new();
    let mut gts = Vec::new();
    let scene_indices: Vec<u64> = eval_indices(train).collect();
    for &i in &scene_indices {
        let scene = generate_scene(data, i)?;
        let boxes: Vec<BBox> = generate_proposals(&scene, &spec, 0).iter().map(|p| p.bbox).collect();
        detections.push(detect(det, params, &scene.image, &boxes, settings)?);
        gts.push(
            scene
                .gt_boxes
                .iter()
                .zip(&scene.gt_labels)
                .map(|(b, &c)| GroundTruth { bbox: *b, class_id: c })
                .collect::<Vec<_>>(),
        );
    }
    Ok(Evaluation {
        report: evaluate_map(&detections, &gts, 0.5),
        detections,
        scene_indices,
    })
}
