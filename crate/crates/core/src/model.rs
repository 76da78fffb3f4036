//! The toy detector: backbone, two-block fusion, kernel block, RoI pooling
//! and the linear head, with a hand-written backward pass.

use rand::Rng;

use crate::boxes::BBox;
use crate::detect::{nms_per_class, Detection};
use crate::error::{Error, Result};
use crate::fusion::{fuse_backward, fuse_cached, FusionCache, FusionConfig, FusionParams};
use crate::head::{head_backward, head_forward, HeadOutput, HeadParams};
use crate::mlkp::{mlkp_backward, mlkp_forward_cached, push_signs, MlkpCache, MlkpConfig, MlkpParams};
use crate::ops::conv::{self, ConvParams};
use crate::ops::pointwise::{relu, relu_backward};
use crate::params::{join, Parameters};
use crate::roi::{max_roi_pool, max_roi_pool_backward, push_argmax_pattern, Roi, RoiPoolOutput};
use crate::tensor::Tensor;

/// Deltas are regressed in units of these per-coordinate scales.
pub const BOX_DELTA_STDS: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Stride-2 3x3 stem.
    pub stem_channels: usize,
    /// Width of each block. The first layer of every block after the first
    /// halves the resolution.
    pub block_channels: Vec<usize>,
    pub layers_per_block: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 8,
            block_channels: vec![16, 32],
            layers_per_block: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub mlkp: MlkpConfig,
    pub pool_h: usize,
    pub pool_w: usize,
    pub num_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let width = 128;
        Self {
            backbone: BackboneConfig::default(),
            fusion: FusionConfig {
                width,
                earlier_layers: vec![0, 1],
                later_layers: vec![0, 1],
            },
            mlkp: MlkpConfig::uniform(3, 64, true, width),
            pool_h: 7,
            pool_w: 7,
            num_classes: 3,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.block_channels.len() != 2 {
            return Err(Error::InvalidConfig(format!(
                "the backbone needs exactly two blocks to fuse, got {}",
                b.block_channels.len()
            )));
        }
        if b.in_channels == 0 || b.stem_channels == 0 || b.layers_per_block == 0 || b.block_channels.contains(&0) {
            return Err(Error::InvalidConfig("backbone widths and depth must be positive".into()));
        }
        self.fusion.validate()?;
        for &l in self.fusion.earlier_layers.iter().chain(&self.fusion.later_layers) {
            if l >= b.layers_per_block {
                return Err(Error::InvalidConfig(format!(
                    "fusion layer {l} out of range for {} layers per block",
                    b.layers_per_block
                )));
            }
        }
        self.mlkp.validate()?;
        if self.pool_h == 0 || self.pool_w == 0 {
            return Err(Error::InvalidConfig("pool size must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Image pixels per cell of the pooled feature map.
    pub fn feature_stride(&self) -> f64 {
        4.0
    }

    pub fn head_in_features(&self) -> usize {
        self.mlkp.output_channels(self.fusion.width) * self.pool_h * self.pool_w
    }

    fn block_input_channels(&self, block: usize) -> usize {
        match block {
            0 => self.backbone.stem_channels,
            _ => self.backbone.block_channels[block - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub stem: ConvParams,
    /// `blocks[b][l]`.
    pub blocks: Vec<Vec<ConvParams>>,
}

impl Parameters for BackboneParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (b, block) in self.blocks.iter().enumerate() {
            for (l, p) in block.iter().enumerate() {
                p.visit(&join(prefix, &format!("block{b}.layer{l}")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (l, p) in block.iter_mut().enumerate() {
                p.visit_mut(&join(prefix, &format!("block{b}.layer{l}")), f);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub backbone: BackboneParams,
    pub fusion: FusionParams,
    pub mlkp: MlkpParams,
    pub head: HeadParams,
}

impl DetectorParams {
    pub fn init<R: Rng + ?Sized>(cfg: &DetectorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let b = &cfg.backbone;
        let stem = ConvParams::xavier(b.stem_channels, b.in_channels, 3, 2, 1, rng);
        let blocks = (0..2)
            .map(|bi| {
                (0..b.layers_per_block)
                    .map(|l| {
                        let c_in = if l == 0 { cfg.block_input_channels(bi) } else { b.block_channels[bi] };
                        let stride = if bi > 0 && l == 0 { 2 } else { 1 };
                        ConvParams::xavier(b.block_channels[bi], c_in, 3, stride, 1, rng)
                    })
                    .collect()
            })
            .collect();
        let cat = |bi: usize, layers: &[usize]| layers.len() * b.block_channels[bi];
        let fusion = FusionParams::xavier(
            cat(0, &cfg.fusion.earlier_layers),
            cat(1, &cfg.fusion.later_layers),
            cfg.fusion.width,
            rng,
        );
        let mlkp = MlkpParams::xavier(&cfg.mlkp, cfg.fusion.width, rng);
        let head = HeadParams::init(cfg.head_in_features(), cfg.num_classes, rng);
        Ok(Self {
            backbone: BackboneParams { stem, blocks },
            fusion,
            mlkp,
            head,
        })
    }
}

impl Parameters for DetectorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.mlkp.visit(&join(prefix, "mlkp"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.mlkp.visit_mut(&join(prefix, "mlkp"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Maps `[0, 1]` pixels to `[-1, 1]`.
pub fn normalize_image(image: &Tensor) -> Tensor {
    image.map(|v| (v - 0.5) * 2.0)
}

#[derive(Debug, Clone)]
pub struct DetectorCache {
    /// Input of every backbone conv, stem first.
    conv_inputs: Vec<Tensor>,
    pre_activations: Vec<Tensor>,
    fusion: FusionCache,
    fused: Tensor,
    mlkp: MlkpCache,
    features: Tensor,
    pool: RoiPoolOutput,
}

impl DetectorCache {
    /// Relu signs and pooling argmaxes of the forward pass.
    pub fn pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for p in &self.pre_activations {
            push_signs(p, &mut out);
        }
        self.mlkp.push_activation_pattern(&mut out);
        push_argmax_pattern(&self.pool, &mut out);
        out
    }

    /// Kernel-block output that RoI pooling reads from.
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn fused(&self) -> &Tensor {
        &self.fused
    }
}

/// Index of the activation produced by layer `l` of block `b` (stem is 0).
fn layer_slot(cfg: &DetectorConfig, b: usize, l: usize) -> usize {
    1 + b * cfg.backbone.layers_per_block + l
}

fn backbone_convs(params: &BackboneParams) -> impl Iterator<Item = &ConvParams> {
    std::iter::once(&params.stem).chain(params.blocks.iter().flatten())
}

/// Network output for `image` (already normalized) and RoIs in feature coordinates.
pub fn detector_forward(
    cfg: &DetectorConfig,
    params: &DetectorParams,
    image: &Tensor,
    rois: &[Roi],
) -> Result<(HeadOutput, DetectorCache)> {
    let mut conv_inputs = Vec::new();
    let mut pre_activations = Vec::new();
    let mut acts = Vec::new();
    let mut x = image.clone();
    for p in backbone_convs(&params.backbone) {
        let pre = conv::conv2d(&x, p)?;
        let a = relu(&pre);
        conv_inputs.push(std::mem::replace(&mut x, a.clone()));
        pre_activations.push(pre);
        acts.push(a);
    }
    let pick = |b: usize, layers: &[usize]| -> Vec<&Tensor> { layers.iter().map(|&l| &acts[layer_slot(cfg, b, l)]).collect() };
    let (fused, fusion) = fuse_cached(
        &pick(0, &cfg.fusion.earlier_layers),
        &pick(1, &cfg.fusion.later_layers),
        &params.fusion,
    )?;
    let (features, mlkp) = mlkp_forward_cached(&fused, &cfg.mlkp, &params.mlkp)?;
    let pool = max_roi_pool(&features, rois, cfg.pool_h, cfg.pool_w)?;
    let out = head_forward(&pool.pooled, &params.head)?;
    Ok((
        out,
        DetectorCache {
            conv_inputs,
            pre_activations,
            fusion,
            fused,
            mlkp,
            features,
            pool,
        },
    ))
}

/// Parameter gradients for upstream gradients on the head outputs.
pub fn detector_backward(
    cfg: &DetectorConfig,
    params: &DetectorParams,
    cache: &DetectorCache,
    grad_logits: &Tensor,
    grad_deltas: &Tensor,
) -> Result<DetectorParams> {
    let (g_pooled, head) = head_backward(&cache.pool.pooled, &params.head, grad_logits, grad_deltas)?;
    let g_features = max_roi_pool_backward(&cache.pool, &g_pooled)?;
    let m = mlkp_backward(&cache.mlkp, &params.mlkp, &g_features)?;
    let f = fuse_backward(&cache.fusion, &params.fusion, &m.input)?;

    let mut g_acts: Vec<Option<Tensor>> = vec![None; cache.pre_activations.len()];
    let mut add = |slot: usize, g: &Tensor| match &mut g_acts[slot] {
        Some(t) => t.add_assign(g),
        None => g_acts[slot] = Some(g.clone()),
    };
    for (&l, g) in cfg.fusion.earlier_layers.iter().zip(&f.earlier) {
        add(layer_slot(cfg, 0, l), g);
    }
    for (&l, g) in cfg.fusion.later_layers.iter().zip(&f.later) {
        add(layer_slot(cfg, 1, l), g);
    }

    let convs: Vec<&ConvParams> = backbone_convs(&params.backbone).collect();
    let mut conv_grads: Vec<ConvParams> = Vec::with_capacity(convs.len());
    for j in (0..convs.len()).rev() {
        let grad = match g_acts[j].take() {
            Some(g) => relu_backward(&cache.pre_activations[j], &g)?,
            None => Tensor::zeros(cache.pre_activations[j].shape()),
        };
        let cg = conv::conv2d_backward(&cache.conv_inputs[j], convs[j], &grad)?;
        if j > 0 {
            match &mut g_acts[j - 1] {
                Some(t) => t.add_assign(&cg.input),
                None => g_acts[j - 1] = Some(cg.input),
            }
        }
        conv_grads.push(ConvParams {
            weight: cg.weight,
            bias: cg.bias,
            ..convs[j].clone()
        });
    }
    conv_grads.reverse();
    let mut it = conv_grads.into_iter();
    let stem = it.next().expect("stem gradient");
    let blocks = params
        .backbone
        .blocks
        .iter()
        .map(|b| b.iter().map(|_| it.next().expect("layer gradient")).collect())
        .collect();
    Ok(DetectorParams {
        backbone: BackboneParams { stem, blocks },
        fusion: f.params,
        mlkp: m.params,
        head,
    })
}

/// Inference settings for turning head outputs into detections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectSettings {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectSettings {
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            nms_iou: 0.3,
            max_detections: 100,
        }
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Class-specific boxes and scores for every proposal, after per-class NMS.
pub fn detect(
    cfg: &DetectorConfig,
    params: &DetectorParams,
    image: &Tensor,
    proposals: &[BBox],
    settings: &DetectSettings,
) -> Result<Vec<Detection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let s = image.shape();
    let rois: Vec<Roi> = proposals
        .iter()
        .map(|b| Roi::from_image_box(0, b, cfg.feature_stride()))
        .collect();
    let (out, _) = detector_forward(cfg, params, &normalize_image(image), &rois)?;
    let k = cfg.num_classes;
    let mut dets = Vec::new();
    for (r, prop) in proposals.iter().enumerate() {
        let probs = softmax_row(&out.logits.data()[r * (k + 1)..(r + 1) * (k + 1)]);
        for (c, &p) in probs.iter().enumerate().skip(1) {
            if p < settings.score_threshold {
                continue;
            }
            let raw = &out.deltas.data()[r * 4 * k + 4 * (c - 1)..r * 4 * k + 4 * c];
            let d = [0, 1, 2, 3].map(|i| raw[i] * BOX_DELTA_STDS[i]);
            dets.push(Detection {
                bbox: prop.decode(&d).clip(s.w as f64, s.h as f64),
                class_id: c,
                score: p,
            });
        }
    }
    let mut kept = nms_per_class(&dets, settings.nms_iou);
    kept.truncate(settings.max_detections);
    Ok(kept)
}
