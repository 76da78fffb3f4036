//! Synthetic detection scenes and a jittered-ground-truth proposal sampler.
//!
//! Classes are told apart only by fill pattern: 1 is solid, 2 is striped,
//! 3 is checkered. Colors are drawn per object, so a detector has to look at
//! texture.

use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::head::RoiTarget;
use crate::roi::Roi;
use crate::tensor::{Shape, Tensor};

pub const MAX_CLASSES: usize = 3;
pub const PLACEMENT_ATTEMPTS: usize = 100;
pub const MAX_SCENE_IOU: f64 = 0.3;
const PATTERN_PERIOD: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side lengths in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            num_classes: 3,
            min_objects: 1,
            max_objects: 4,
            min_size: 16,
            max_size: 48,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return bad(format!("num_classes must be in 1..={MAX_CLASSES}, got {}", self.num_classes));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        if self.min_size < 4 || self.min_size > self.max_size {
            return bad(format!("object sizes {}..={} must satisfy 4 <= min <= max", self.min_size, self.max_size));
        }
        if self.max_size > self.height || self.max_size > self.width {
            return bad("max_size exceeds the image".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub index: u64,
    /// `(1, 3, height, width)` with values in `[0, 1]`.
    pub image: Tensor,
    pub gt_boxes: Vec<BBox>,
    /// In `1..=num_classes`, parallel to `gt_boxes`.
    pub gt_labels: Vec<usize>,
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Whether pixel `(y, x)` relative to the box corner takes the primary color.
fn pattern_on(label: usize, y: usize, x: usize) -> bool {
    match label {
        1 => true,
        2 => (y / PATTERN_PERIOD).is_multiple_of(2),
        _ => ((y / PATTERN_PERIOD) + (x / PATTERN_PERIOD)).is_multiple_of(2),
    }
}

pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, 2 * index);
    let (h, w) = (spec.height, spec.width);
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    let background = random_color(&mut rng);
    for (c, &base) in background.iter().enumerate() {
        let m = 0.5 * base + 0.25;
        for v in image.plane_mut(0, c) {
            *v = m;
        }
    }

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut gt_boxes = Vec::with_capacity(count);
    let mut gt_labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.random_range(1..=spec.num_classes);
        let primary = random_color(&mut rng);
        let secondary = primary.map(|v| 1.0 - v);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let bw = rng.random_range(spec.min_size..=spec.max_size);
            let bh = rng.random_range(spec.min_size..=spec.max_size);
            let x0 = rng.random_range(0..=w - bw);
            let y0 = rng.random_range(0..=h - bh);
            let b = BBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64);
            if gt_boxes.iter().all(|g: &BBox| g.iou(&b) <= MAX_SCENE_IOU) {
                placed = Some((x0, y0, bw, bh, b));
                break;
            }
        }
        let Some((x0, y0, bw, bh, b)) = placed else {
            continue;
        };
        for c in 0..3 {
            let plane = image.plane_mut(0, c);
            for y in 0..bh {
                for x in 0..bw {
                    plane[(y0 + y) * w + x0 + x] = if pattern_on(label, y, x) { primary[c] } else { secondary[c] };
                }
            }
        }
        gt_boxes.push(b);
        gt_labels.push(label);
    }

    if spec.noise > 0.0 {
        for v in image.data_mut() {
            *v = (*v + rng.random_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0);
        }
    }
    Ok(Scene {
        index,
        image,
        gt_boxes,
        gt_labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSpec {
    pub positives_per_gt: usize,
    pub negatives: usize,
    /// Relative jitter of center and size, uniform in `[-jitter, jitter]`.
    pub jitter: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    /// Image pixels per feature cell.
    pub feature_stride: f64,
    pub min_size: usize,
    pub max_size: usize,
    pub seed: u64,
}

impl Default for ProposalSpec {
    fn default() -> Self {
        Self {
            positives_per_gt: 4,
            negatives: 24,
            jitter: 0.2,
            positive_iou: 0.5,
            negative_iou: 0.3,
            feature_stride: 4.0,
            min_size: 16,
            max_size: 48,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    /// Image coordinates.
    pub bbox: BBox,
    /// Feature-map coordinates.
    pub roi: Roi,
    /// Raw encoded deltas toward the source box; zero for background.
    pub target: RoiTarget,
    pub source_gt: Option<usize>,
}

fn jitter_box<R: Rng + ?Sized>(gt: &BBox, jitter: f64, rng: &mut R) -> BBox {
    if jitter == 0.0 {
        return *gt;
    }
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    let mut u = || rng.random_range(-jitter..=jitter);
    BBox::from_center(cx + u() * w, cy + u() * h, w * (1.0 + u()), h * (1.0 + u()))
}

/// Labeled proposals for one scene. `sample` selects an independent draw for
/// the same scene.
pub fn generate_proposals(scene: &Scene, spec: &ProposalSpec, sample: u64) -> Vec<Proposal> {
    let s = scene.image.shape();
    let (img_w, img_h) = (s.w as f64, s.h as f64);
    let mut rng = scene_rng(spec.seed ^ sample.wrapping_mul(0x9E37_79B9_7F4A_7C15), 2 * scene.index + 1);
    let mk = |bbox: BBox, target: RoiTarget, source_gt| Proposal {
        bbox,
        roi: Roi::from_image_box(0, &bbox, spec.feature_stride),
        target,
        source_gt,
    };
    let mut out = Vec::new();
    for (i, (gt, &label)) in scene.gt_boxes.iter().zip(&scene.gt_labels).enumerate() {
        for _ in 0..spec.positives_per_gt {
            let mut chosen = *gt;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let b = jitter_box(gt, spec.jitter, &mut rng).clip(img_w, img_h);
                if b.area() > 0.0 && b.iou(gt) >= spec.positive_iou {
                    chosen = b;
                    break;
                }
            }
            out.push(mk(chosen, RoiTarget { label, deltas: chosen.encode(gt) }, Some(i)));
        }
    }
    let (lo, hi) = (spec.min_size.max(1), spec.max_size.max(spec.min_size.max(1)).min(s.w.min(s.h)));
    for _ in 0..spec.negatives {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let bw = rng.random_range(lo as f64..=hi as f64);
            let bh = rng.random_range(lo as f64..=hi as f64);
            let x0 = rng.random_range(0.0..=img_w - bw);
            let y0 = rng.random_range(0.0..=img_h - bh);
            let b = BBox::new(x0, y0, x0 + bw, y0 + bh);
            if scene.gt_boxes.iter().all(|g| g.iou(&b) < spec.negative_iou) {
                out.push(mk(b, RoiTarget { label: 0, deltas: [0.0; 4] }, None));
                break;
            }
        }
    }
    out
}

/// Binary RGB PPM.
pub fn write_ppm<W: Write>(image: &Tensor, mut out: W) -> io::Result<()> {
    let s = image.shape();
    write!(out, "P6\n{} {}\n255\n", s.w, s.h)?;
    let mut bytes = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3.min(s.c) {
                bytes.push((image.get(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out.write_all(&bytes)
}

/// `index class x0 y0 x1 y1` per ground-truth box.
pub fn annotation_lines(scene: &Scene) -> String {
    scene
        .gt_boxes
        .iter()
        .zip(&scene.gt_labels)
        .map(|(b, l)| format!("{} {} {} {} {} {}\n", scene.index, l, b.x0, b.y0, b.x1, b.y1))
        .collect()
}

/// Writes `scene_<index>.ppm` and `scene_<index>.txt` into `dir`.
pub fn export_scene(scene: &Scene, dir: &Path) -> io::Result<()> {
    let stem = format!("scene_{:05}", scene.index);
    let f = std::fs::File::create(dir.join(format!("{stem}.ppm")))?;
    write_ppm(&scene.image, io::BufWriter::new(f))?;
    std::fs::write(dir.join(format!("{stem}.txt")), annotation_lines(scene))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_objects_gives_background_only() {
        let spec = SceneSpec { min_objects: 0, max_objects: 0, ..SceneSpec::default() };
        let s = generate_scene(&spec, 3).unwrap();
        assert!(s.gt_boxes.is_empty() && s.gt_labels.is_empty());
        let props = generate_proposals(&s, &ProposalSpec::default(), 0);
        assert!(!props.is_empty() && props.iter().all(|p| p.target.label == 0));
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec { seed: 7, ..SceneSpec::default() };
        let a = generate_scene(&spec, 0).unwrap();
        let b = generate_scene(&spec, 0).unwrap();
        assert!(a.image.bit_eq(&b.image));
        assert_eq!(a.gt_boxes, b.gt_boxes);
        assert!(!a.image.bit_eq(&generate_scene(&spec, 1).unwrap().image));
    }

    #[test]
    fn zero_jitter_reproduces_ground_truth() {
        let s = generate_scene(&SceneSpec { min_objects: 2, ..SceneSpec::default() }, 0).unwrap();
        let spec = ProposalSpec { jitter: 0.0, ..ProposalSpec::default() };
        for p in generate_proposals(&s, &spec, 0).iter().filter(|p| p.target.label > 0) {
            assert_eq!(p.bbox, s.gt_boxes[p.source_gt.unwrap()]);
            assert_eq!(p.target.deltas, [0.0; 4]);
        }
    }

    #[test]
    fn invalid_scene_settings_rejected() {
        assert!(generate_scene(&SceneSpec { num_classes: 4, ..SceneSpec::default() }, 0).is_err());
        assert!(generate_scene(&SceneSpec { min_size: 2, ..SceneSpec::default() }, 0).is_err());
    }

    #[test]
    fn ppm_header_and_size() {
        let s = generate_scene(&SceneSpec { height: 8, width: 6, min_size: 4, max_size: 5, ..SceneSpec::default() }, 0).unwrap();
        let mut buf = Vec::new();
        write_ppm(&s.image, &mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n6 8\n255\n"));
        assert_eq!(buf.len(), "P6\n6 8\n255\n".len() + 6 * 8 * 3);
    }
}
