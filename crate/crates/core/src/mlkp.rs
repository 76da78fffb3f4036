//! Location-aware polynomial kernel feature maps.
//!
//! For each order `r` in `2..=R` the block applies `r` independent 1x1
//! convolutions with `D_r` output channels to the input map and multiplies
//! the results element-wise. Channel `d` at pixel `x` is then
//! `prod_s (<u_s^{r,d}, x> + b_s^{r,d})`, one rank-1 term of a low-rank
//! order-`r` polynomial kernel. A small convolutional network predicts a
//! single-channel weight map `m` in `(0, 1)` that scales every order's map,
//! and the output stacks the raw input with all weighted orders:
//! `G = [X, Z^2 * m, ..., Z^R * m]`.
//!
//! The weight map is shared across orders. Global pooling is never applied,
//! so every output pixel depends only on a small neighbourhood of the input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvParams};
use crate::ops::pointwise::{
    concat_channels, product, reduce_channels, relu, relu_backward, sigmoid,
    sigmoid_backward,
};
use crate::params::{accumulate, join, zeros_like, Parameters};
use crate::tensor::{Shape, Tensor};

/// Order count and per-order ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlkpConfig {
    /// Highest polynomial order `R`; 1 means the block passes its input through.
    pub max_order: usize,
    /// `ranks[r - 2]` is the rank `D_r` of order `r`.
    pub ranks: Vec<usize>,
    pub location_weight: bool,
    pub location_hidden: usize,
}

impl MlkpConfig {
    pub fn new(max_order: usize, ranks: Vec<usize>, location_weight: bool, location_hidden: usize) -> Result<Self> {
        let cfg = Self {
            max_order,
            ranks,
            location_weight,
            location_hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same rank for every order, hidden width from [`Self::default_hidden`].
    pub fn uniform(max_order: usize, rank: usize, location_weight: bool, in_channels: usize) -> Self {
        Self {
            max_order,
            ranks: vec![rank; max_order.saturating_sub(1)],
            location_weight,
            location_hidden: Self::default_hidden(in_channels),
        }
    }

    /// `ceil(c / 4)`, at least 1.
    pub fn default_hidden(in_channels: usize) -> usize {
        in_channels.div_ceil(4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.max_order) {
            return Err(Error::InvalidConfig(format!(
                "max_order must be 1, 2 or 3, got {}",
                self.max_order
            )));
        }
        if self.ranks.len() != self.max_order - 1 {
            return Err(Error::InvalidConfig(format!(
                "max_order {} needs {} ranks, got {}",
                self.max_order,
                self.max_order - 1,
                self.ranks.len()
            )));
        }
        if self.ranks.contains(&0) {
            return Err(Error::InvalidConfig("every rank must be at least 1".into()));
        }
        if self.location_weight && self.location_hidden == 0 {
            return Err(Error::InvalidConfig("location_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn rank(&self, order: usize) -> usize {
        self.ranks[order - 2]
    }

    pub fn orders(&self) -> impl Iterator<Item = usize> {
        2..=self.max_order
    }

    /// Whether a location-weight network is evaluated at all.
    pub fn uses_location(&self) -> bool {
        self.location_weight && self.max_order >= 2
    }

    pub fn output_channels(&self, in_channels: usize) -> usize {
        in_channels + self.ranks.iter().sum::<usize>()
    }
}

/// Location-weight network: 1x1 reduce, relu, 3x3 (pad 1), relu, 1x1 to one
/// channel, sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationParams {
    pub reduce: ConvParams,
    pub hidden: ConvParams,
    pub project: ConvParams,
}

impl LocationParams {
    pub fn xavier<R: Rng + ?Sized>(in_channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            reduce: ConvParams::xavier(hidden, in_channels, 1, 1, 0, rng),
            hidden: ConvParams::xavier(hidden, hidden, 3, 1, 1, rng),
            project: ConvParams::xavier(1, hidden, 1, 1, 0, rng),
        }
    }

    pub fn zeros(in_channels: usize, hidden: usize) -> Self {
        Self {
            reduce: ConvParams::zeros(hidden, in_channels, 1, 1, 0),
            hidden: ConvParams::zeros(hidden, hidden, 3, 1, 1),
            project: ConvParams::zeros(1, hidden, 1, 1, 0),
        }
    }
}

impl Parameters for LocationParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlkpParams {
    /// `factors[r - 2][s]` is the 1x1 convolution of slot `s` for order `r`;
    /// output channel `d` of its weight is the vector `u_s^{r,d}`.
    pub factors: Vec<Vec<ConvParams>>,
    /// Present exactly when the config uses a location weight.
    pub location: Option<LocationParams>,
}

impl MlkpParams {
    pub fn xavier<R: Rng + ?Sized>(cfg: &MlkpConfig, in_channels: usize, rng: &mut R) -> Self {
        let factors = cfg
            .orders()
            .map(|r| {
                (0..r)
                    .map(|_| ConvParams::xavier(cfg.rank(r), in_channels, 1, 1, 0, rng))
                    .collect()
            })
            .collect();
        let location = cfg
            .uses_location()
            .then(|| LocationParams::xavier(in_channels, cfg.location_hidden, rng));
        Self { factors, location }
    }

    pub fn zeros(cfg: &MlkpConfig, in_channels: usize) -> Self {
        let factors = cfg
            .orders()
            .map(|r| {
                (0..r)
                    .map(|_| ConvParams::zeros(cfg.rank(r), in_channels, 1, 1, 0))
                    .collect()
            })
            .collect();
        let location = cfg
            .uses_location()
            .then(|| LocationParams::zeros(in_channels, cfg.location_hidden));
        Self { factors, location }
    }

    /// Checks the parameter layout against `cfg` for an input of `in_channels`.
    pub fn validate(&self, cfg: &MlkpConfig, in_channels: usize) -> Result<()> {
        cfg.validate()?;
        if self.factors.len() != cfg.max_order - 1 {
            return Err(Error::InvalidConfig(format!(
                "expected factor convolutions for {} orders, got {}",
                cfg.max_order - 1,
                self.factors.len()
            )));
        }
        for r in cfg.orders() {
            let slots = &self.factors[r - 2];
            if slots.len() != r {
                return Err(Error::InvalidConfig(format!(
                    "order {r} needs {r} factor convolutions, got {}",
                    slots.len()
                )));
            }
            for (s, p) in slots.iter().enumerate() {
                let w = p.weight.shape();
                if w.n != cfg.rank(r) || w.c != in_channels || w.h != 1 || w.w != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "order {r} slot {s}: expected 1x1 weight {}x{in_channels}, got {w}",
                        cfg.rank(r)
                    )));
                }
            }
        }
        match (&self.location, cfg.uses_location()) {
            (Some(loc), true) => {
                let reduce = loc.reduce.weight.shape();
                let project = loc.project.weight.shape();
                if reduce.c != in_channels || project.n != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "location network expects {in_channels} input channels and 1 output, got {reduce} / {project}"
                    )));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::InvalidConfig(
                    "location parameters given but location weighting is disabled".into(),
                ))
            }
            (None, true) => {
                return Err(Error::InvalidConfig(
                    "location weighting enabled but no location parameters".into(),
                ))
            }
        }
        Ok(())
    }
}

impl Parameters for MlkpParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, slots) in self.factors.iter().enumerate() {
            let order = join(prefix, &format!("order{}", i + 2));
            for (s, p) in slots.iter().enumerate() {
                p.visit(&join(&order, &format!("slot{s}")), f);
            }
        }
        if let Some(loc) = &self.location {
            loc.visit(&join(prefix, "location"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, slots) in self.factors.iter_mut().enumerate() {
            let order = join(prefix, &format!("order{}", i + 2));
            for (s, p) in slots.iter_mut().enumerate() {
                p.visit_mut(&join(&order, &format!("slot{s}")), f);
            }
        }
        if let Some(loc) = &mut self.location {
            loc.visit_mut(&join(prefix, "location"), f);
        }
    }
}

fn factor_slots(params: &MlkpParams, order: usize) -> Result<&[ConvParams]> {
    if order < 2 {
        return Err(Error::InvalidConfig(format!(
            "order maps exist for orders >= 2, got {order}"
        )));
    }
    let slots = params
        .factors
        .get(order - 2)
        .ok_or_else(|| Error::InvalidConfig(format!("missing factor convolutions for order {order}")))?;
    if slots.len() < order {
        return Err(Error::InvalidConfig(format!(
            "missing factor convolution for order {order} slot {}",
            slots.len()
        )));
    }
    Ok(&slots[..order])
}

/// Per-slot activations `Z_s^r` for one order.
fn slot_maps(x: &Tensor, params: &MlkpParams, order: usize) -> Result<Vec<Tensor>> {
    factor_slots(params, order)?
        .iter()
        .map(|p| {
            if p.kernel() != (1, 1) || p.stride != 1 || p.padding != 0 {
                return Err(Error::InvalidConfig(format!(
                    "order {order} factor convolutions must be 1x1, stride 1, no padding"
                )));
            }
            conv::conv2d(x, p)
        })
        .collect()
}

fn hadamard_all(maps: &[Tensor]) -> Result<Tensor> {
    let mut acc = maps[0].clone();
    for m in &maps[1..] {
        acc = product(&acc, m)?;
    }
    Ok(acc)
}

/// `Z^r = Z_1^r * ... * Z_r^r`, shape `(n, D_r, h, w)`.
pub fn compute_order_maps(x: &Tensor, params: &MlkpParams, order: usize) -> Result<Tensor> {
    hadamard_all(&slot_maps(x, params, order)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationCache {
    input: Tensor,
    reduce_pre: Tensor,
    hidden_in: Tensor,
    hidden_pre: Tensor,
    project_in: Tensor,
    weight: Tensor,
}

fn location_forward_cached(x: &Tensor, loc: &LocationParams) -> Result<LocationCache> {
    let reduce_pre = conv::conv2d(x, &loc.reduce)?;
    let hidden_in = relu(&reduce_pre);
    let hidden_pre = conv::conv2d(&hidden_in, &loc.hidden)?;
    let project_in = relu(&hidden_pre);
    let logits = conv::conv2d(&project_in, &loc.project)?;
    if logits.shape().c != 1 {
        return Err(Error::InvalidConfig(format!(
            "location network must end in one channel, got {}",
            logits.shape()
        )));
    }
    if logits.shape().h != x.shape().h || logits.shape().w != x.shape().w {
        return Err(Error::ShapeMismatch {
            op: "location_weight_forward",
            lhs: x.shape(),
            rhs: logits.shape(),
        });
    }
    Ok(LocationCache {
        input: x.clone(),
        reduce_pre,
        hidden_in,
        hidden_pre,
        project_in,
        weight: sigmoid(&logits),
    })
}

fn location_backward(cache: &LocationCache, loc: &LocationParams, grad_m: &Tensor) -> Result<(Tensor, LocationParams)> {
    let g_logits = sigmoid_backward(&cache.weight, grad_m)?;
    let project = conv::conv2d_backward(&cache.project_in, &loc.project, &g_logits)?;
    let g_hidden = relu_backward(&cache.hidden_pre, &project.input)?;
    let hidden = conv::conv2d_backward(&cache.hidden_in, &loc.hidden, &g_hidden)?;
    let g_reduce = relu_backward(&cache.reduce_pre, &hidden.input)?;
    let reduce = conv::conv2d_backward(&cache.input, &loc.reduce, &g_reduce)?;
    let grads = LocationParams {
        reduce: ConvParams {
            weight: reduce.weight,
            bias: reduce.bias,
            ..loc.reduce.clone()
        },
        hidden: ConvParams {
            weight: hidden.weight,
            bias: hidden.bias,
            ..loc.hidden.clone()
        },
        project: ConvParams {
            weight: project.weight,
            bias: project.bias,
            ..loc.project.clone()
        },
    };
    Ok((reduce.input, grads))
}

/// Weight map `m(X)` of shape `(n, 1, h, w)` with values in `(0, 1)`.
pub fn location_weight_forward(x: &Tensor, loc: &LocationParams) -> Result<Tensor> {
    Ok(location_forward_cached(x, loc)?.weight)
}

/// `Z^r * (1 (x) m)`: every channel of `z` scaled by the single channel of `m`.
pub fn apply_location_weight(z: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (zs, ms) = (z.shape(), m.shape());
    if ms.c != 1 || ms.n != zs.n || ms.h != zs.h || ms.w != zs.w {
        return Err(Error::ShapeMismatch {
            op: "apply_location_weight",
            lhs: zs,
            rhs: ms,
        });
    }
    product(z, m)
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlkpCache {
    input: Tensor,
    /// `slots[r - 2][s]` holds `Z_s^r`.
    slots: Vec<Vec<Tensor>>,
    products: Vec<Tensor>,
    location: Option<LocationCache>,
}

impl MlkpCache {
    pub fn order_map(&self, order: usize) -> &Tensor {
        &self.products[order - 2]
    }

    pub fn location_weight(&self) -> Option<&Tensor> {
        self.location.as_ref().map(|l| &l.weight)
    }

    /// Sign pattern of every relu input, for detecting kink crossings.
    pub fn push_activation_pattern(&self, out: &mut Vec<u64>) {
        if let Some(l) = &self.location {
            push_signs(&l.reduce_pre, out);
            push_signs(&l.hidden_pre, out);
        }
    }
}

/// Packs `v > 0` for every element into 64-bit words.
pub fn push_signs(t: &Tensor, out: &mut Vec<u64>) {
    for chunk in t.data().chunks(64) {
        let mut word = 0u64;
        for (i, v) in chunk.iter().enumerate() {
            if *v > 0.0 {
                word |= 1 << i;
            }
        }
        out.push(word);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlkpGrads {
    pub input: Tensor,
    pub params: MlkpParams,
}

/// Forward pass; the returned cache feeds [`mlkp_backward`].
pub fn mlkp_forward_cached(x: &Tensor, cfg: &MlkpConfig, params: &MlkpParams) -> Result<(Tensor, MlkpCache)> {
    params.validate(cfg, x.shape().c)?;
    let location = match &params.location {
        Some(loc) if cfg.uses_location() => Some(location_forward_cached(x, loc)?),
        _ => None,
    };
    let mut slots = Vec::with_capacity(cfg.max_order.saturating_sub(1));
    let mut products = Vec::with_capacity(slots.capacity());
    let mut weighted = Vec::with_capacity(slots.capacity());
    for r in cfg.orders() {
        let maps = slot_maps(x, params, r)?;
        let z = hadamard_all(&maps)?;
        weighted.push(match &location {
            Some(l) => apply_location_weight(&z, &l.weight)?,
            None => z.clone(),
        });
        slots.push(maps);
        products.push(z);
    }
    let mut parts: Vec<&Tensor> = vec![x];
    parts.extend(weighted.iter());
    let out = concat_channels(&parts)?;
    Ok((
        out,
        MlkpCache {
            input: x.clone(),
            slots,
            products,
            location,
        },
    ))
}

/// `G(X) = [X, g_2(X), ..., g_R(X)]`.
pub fn mlkp_forward(x: &Tensor, cfg: &MlkpConfig, params: &MlkpParams) -> Result<Tensor> {
    Ok(mlkp_forward_cached(x, cfg, params)?.0)
}

/// Gradients with respect to the input and every block parameter.
///
/// The input gradient collects the identity path of the concatenation, the
/// product rule through each slot of each order, and the path through the
/// shared location weight. Location-network gradients sum over all orders.
pub fn mlkp_backward(cache: &MlkpCache, params: &MlkpParams, grad: &Tensor) -> Result<MlkpGrads> {
    let xs = cache.input.shape();
    let expected_c = xs.c + cache.products.iter().map(|z| z.shape().c).sum::<usize>();
    if grad.shape() != xs.with_channels(expected_c) {
        return Err(Error::ShapeMismatch {
            op: "mlkp_backward",
            lhs: xs.with_channels(expected_c),
            rhs: grad.shape(),
        });
    }
    let mut grad_x = grad.slice_channels(0, xs.c)?;
    let mut grads = zeros_like(params);
    let mut grad_m = cache
        .location
        .as_ref()
        .map(|_| Tensor::zeros(xs.with_channels(1)));
    let mut offset = xs.c;

    for (i, (maps, z)) in cache.slots.iter().zip(&cache.products).enumerate() {
        let d = z.shape().c;
        let g_weighted = grad.slice_channels(offset, d)?;
        offset += d;
        let g_z = match (&cache.location, grad_m.as_mut()) {
            (Some(l), Some(gm)) => {
                gm.add_assign(&reduce_channels(&product(&g_weighted, z)?));
                product(&g_weighted, &l.weight)?
            }
            _ => g_weighted,
        };
        for s in 0..maps.len() {
            let others: Vec<Tensor> = maps
                .iter()
                .enumerate()
                .filter(|&(t, _)| t != s)
                .map(|(_, m)| m.clone())
                .collect();
            let g_slot = product(&g_z, &hadamard_all(&others)?)?;
            let p = &params.factors[i][s];
            let cg = conv::conv2d_backward(&cache.input, p, &g_slot)?;
            grad_x.add_assign(&cg.input);
            let dst = &mut grads.factors[i][s];
            dst.weight.add_assign(&cg.weight);
            for (b, g) in dst.bias.iter_mut().zip(&cg.bias) {
                *b += g;
            }
        }
    }

    if let (Some(l), Some(gm), Some(loc)) = (&cache.location, &grad_m, &params.location) {
        let (gx, gloc) = location_backward(l, loc, gm)?;
        grad_x.add_assign(&gx);
        if let Some(dst) = grads.location.as_mut() {
            accumulate(dst, &gloc);
        }
    }

    Ok(MlkpGrads {
        input: grad_x,
        params: grads,
    })
}

/// Stateful wrapper that keeps the most recent forward cache.
#[derive(Debug, Clone)]
pub struct MlkpBlock {
    pub config: MlkpConfig,
    pub params: MlkpParams,
    cache: Option<MlkpCache>,
}

impl MlkpBlock {
    pub fn new(config: MlkpConfig, params: MlkpParams) -> Self {
        Self {
            config,
            params,
            cache: None,
        }
    }

    /// Runs the block; the cache is kept only when `keep_cache` is set.
    pub fn forward(&mut self, x: &Tensor, keep_cache: bool) -> Result<Tensor> {
        if keep_cache {
            let (out, cache) = mlkp_forward_cached(x, &self.config, &self.params)?;
            self.cache = Some(cache);
            Ok(out)
        } else {
            self.cache = None;
            mlkp_forward(x, &self.config, &self.params)
        }
    }

    pub fn backward(&self, grad: &Tensor) -> Result<MlkpGrads> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward { op: "mlkp_backward" })?;
        mlkp_backward(cache, &self.params, grad)
    }
}

/// Output shape of the block for an input of shape `s`.
pub fn output_shape(cfg: &MlkpConfig, s: Shape) -> Shape {
    s.with_channels(cfg.output_channels(s.c))
}
