//! Synthetic scenes: ground-truth boxes with the exact corner detections and
//! segmentation maps a perfect network would produce, plus seeded corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{intersection_area, Point, RotatedRect};
use crate::pipeline::{CornerDetection, CornerSets};
use crate::targets::{canonical_corner_order, ps_masks, CornerType, PsMaskSet};
use crate::tensorio::SceneAnnotation;

/// Noise applied by [`corrupt`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Standard deviation of the Gaussian corner displacement, in pixels.
    pub jitter_sigma: f64,
    /// Standard deviation of the (one-sided) score reduction.
    pub score_noise: f64,
    /// Probability of dropping each corner.
    pub drop_prob: f64,
    /// Per-type drop probabilities (TL, TR, BR, BL); overrides `drop_prob`.
    pub drop_prob_per_type: Option<[f64; 4]>,
    /// Probability, per true corner, of adding one spurious corner.
    pub spurious_rate: f64,
    /// Probability of flipping each segmentation value.
    pub seg_flip_rate: f64,
}

impl NoiseConfig {
    pub fn is_zero(&self) -> bool {
        self.jitter_sigma == 0.0
            && self.score_noise == 0.0
            && self.drop_prob == 0.0
            && self.drop_prob_per_type.is_none_or(|p| p.iter().all(|&v| v == 0.0))
            && self.spurious_rate == 0.0
            && self.seg_flip_rate == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("noise.{name} = {v} outside [0, 1]")))
            }
        };
        prob("drop_prob", self.drop_prob)?;
        prob("spurious_rate", self.spurious_rate)?;
        prob("seg_flip_rate", self.seg_flip_rate)?;
        if let Some(p) = self.drop_prob_per_type {
            for v in p {
                prob("drop_prob_per_type", v)?;
            }
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise.jitter_sigma = {} invalid",
                self.jitter_sigma
            )));
        }
        if !(self.score_noise >= 0.0 && self.score_noise.is_finite()) {
            return Err(Error::Config(format!(
                "noise.score_noise = {} invalid",
                self.score_noise
            )));
        }
        Ok(())
    }

    fn drop_prob_for(&self, t: CornerType) -> f64 {
        self.drop_prob_per_type.map_or(self.drop_prob, |p| p[t.index()])
    }
}

/// Scene generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Orientation range of the long side, degrees.
    pub theta_min_deg: f64,
    pub theta_max_deg: f64,
    pub short_side_min: f64,
    pub short_side_max: f64,
    /// Long side over short side.
    pub aspect_min: f64,
    pub aspect_max: f64,
    /// Minimum gap between boxes, pixels.
    pub min_separation: f64,
    /// Minimum distance from every corner to the image border, pixels.
    pub margin: f64,
    /// Placement attempts per box before giving up.
    pub max_attempts: usize,
    /// Grid order of the generated masks.
    pub g: usize,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_width: 512,
            image_height: 512,
            min_boxes: 1,
            max_boxes: 8,
            theta_min_deg: -80.0,
            theta_max_deg: 80.0,
            short_side_min: 8.0,
            short_side_max: 32.0,
            aspect_min: 1.5,
            aspect_max: 5.0,
            min_separation: 8.0,
            margin: 4.0,
            max_attempts: 1000,
            g: 2,
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_width == 0 || self.image_height == 0 {
            return bad(format!(
                "image size {}x{} is empty",
                self.image_width, self.image_height
            ));
        }
        if self.min_boxes > self.max_boxes {
            return bad(format!(
                "box count range {}..={} is empty",
                self.min_boxes, self.max_boxes
            ));
        }
        if !(self.theta_min_deg <= self.theta_max_deg) {
            return bad(format!(
                "theta range [{}, {}] is empty",
                self.theta_min_deg, self.theta_max_deg
            ));
        }
        if !(self.short_side_min >= 8.0 && self.short_side_min <= self.short_side_max) {
            return bad(format!(
                "short side range [{}, {}] must be non-empty and start at 8 or more",
                self.short_side_min, self.short_side_max
            ));
        }
        if !(self.aspect_min >= 1.0 && self.aspect_min <= self.aspect_max) {
            return bad(format!(
                "aspect range [{}, {}] invalid",
                self.aspect_min, self.aspect_max
            ));
        }
        if !(self.min_separation >= 0.0 && self.margin >= 0.0) {
            return bad("separation and margin must be non-negative".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        if self.g == 0 {
            return bad("g must be at least 1".into());
        }
        self.noise.validate()
    }
}

/// Everything a perfect network would output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub annotation: SceneAnnotation,
    pub corners: CornerSets,
    pub masks: PsMaskSet,
}

impl Scene {
    pub fn boxes(&self) -> Vec<RotatedRect> {
        self.annotation.rects()
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn inflate(r: &RotatedRect, by: f64) -> RotatedRect {
    let c = r.center();
    let u = r.tr().sub(r.tl());
    let v = r.bl().sub(r.tl());
    let (lu, lv) = (u.norm(), v.norm());
    let du = u.scale(by / lu);
    let dv = v.scale(by / lv);
    let hu = u.scale(0.5).add(du);
    let hv = v.scale(0.5).add(dv);
    RotatedRect::from_corners([
        c.sub(hu).sub(hv),
        c.add(hu).sub(hv),
        c.add(hu).add(hv),
        c.sub(hu).add(hv),
    ])
}

/// Exact corners of every box, score 1, short side of the box.
pub fn perfect_corners(boxes: &[RotatedRect]) -> CornerSets {
    CornerSets::from_detections(boxes.iter().flat_map(|b| {
        let ss = b.short_side();
        CornerType::ALL.map(|t| CornerDetection {
            corner_type: t,
            position: b.corners[t.index()],
            short_side: ss,
            score: 1.0,
        })
    }))
}

/// Generates one noise-free scene. Boxes are in canonical corner order, keep
/// `margin` pixels from the border and `min_separation` pixels from each other.
pub fn generate_scene(cfg: &SynthConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let mut boxes: Vec<RotatedRect> = Vec::with_capacity(n);
    let mut inflated: Vec<RotatedRect> = Vec::with_capacity(n);
    for i in 0..n {
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let ss = uniform(&mut rng, cfg.short_side_min, cfg.short_side_max);
            let long = ss * uniform(&mut rng, cfg.aspect_min, cfg.aspect_max);
            let theta = uniform(&mut rng, cfg.theta_min_deg, cfg.theta_max_deg).to_radians();
            let half_x = 0.5 * (long * theta.cos().abs() + ss * theta.sin().abs());
            let half_y = 0.5 * (long * theta.sin().abs() + ss * theta.cos().abs());
            let (lo_x, hi_x) = (cfg.margin + half_x, w - cfg.margin - half_x);
            let (lo_y, hi_y) = (cfg.margin + half_y, h - cfg.margin - half_y);
            if lo_x > hi_x || lo_y > hi_y {
                continue;
            }
            let cx = uniform(&mut rng, lo_x, hi_x);
            let cy = uniform(&mut rng, lo_y, hi_y);
            let raw = RotatedRect::from_center_form(cx, cy, long, ss, theta)?;
            let rect = canonical_corner_order(raw.corners);
            let grown = inflate(&rect, 0.5 * cfg.min_separation);
            if inflated.iter().any(|o| intersection_area(o, &grown) > 0.0) {
                continue;
            }
            boxes.push(rect);
            inflated.push(grown);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Synth(format!(
                "could not place box {} of {n} after {} attempts (seed {seed})",
                i + 1,
                cfg.max_attempts
            )));
        }
    }
    let masks = ps_masks(&boxes, cfg.g, cfg.image_height, cfg.image_width)?;
    Ok(Scene {
        annotation: SceneAnnotation::new(cfg.image_width as u32, cfg.image_height as u32, &boxes),
        corners: perfect_corners(&boxes),
        masks,
    })
}

/// Applies jitter, score noise, drops, spurious corners and segmentation flips.
/// All-zero noise returns the inputs unchanged.
pub fn corrupt(
    corners: &CornerSets,
    masks: &PsMaskSet,
    noise: &NoiseConfig,
    image_size: (usize, usize),
    short_side_range: (f64, f64),
    seed: u64,
) -> Result<(CornerSets, PsMaskSet)> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let jitter = Normal::new(0.0, noise.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let score_noise = Normal::new(0.0, noise.score_noise).map_err(|e| Error::Config(e.to_string()))?;
    let (w, h) = image_size;

    let mut out = Vec::with_capacity(corners.len());
    let mut spurious = Vec::new();
    for d in corners.iter() {
        let mut d = *d;
        if noise.jitter_sigma > 0.0 {
            d.position = d
                .position
                .add(Point::new(jitter.sample(&mut rng), jitter.sample(&mut rng)));
        }
        if noise.score_noise > 0.0 {
            let s: f64 = score_noise.sample(&mut rng);
            d.score = (d.score - s.abs()).clamp(0.0, 1.0);
        }
        let p_drop = noise.drop_prob_for(d.corner_type);
        let dropped = p_drop > 0.0 && rng.random_bool(p_drop);
        if noise.spurious_rate > 0.0 && rng.random_bool(noise.spurious_rate) {
            let t = CornerType::ALL[rng.random_range(0..4)];
            spurious.push(CornerDetection {
                corner_type: t,
                position: Point::new(uniform(&mut rng, 0.0, w as f64), uniform(&mut rng, 0.0, h as f64)),
                short_side: uniform(&mut rng, short_side_range.0, short_side_range.1),
                score: 1.0,
            });
        }
        if !dropped {
            out.push(d);
        }
    }
    out.extend(spurious);

    let mut masks = masks.clone();
    if noise.seg_flip_rate > 0.0 {
        for v in masks.masks.data_mut() {
            if rng.random_bool(noise.seg_flip_rate) {
                *v = 1.0 - *v;
            }
        }
    }
    Ok((CornerSets::from_detections(out), masks))
}

/// Generates a scene and corrupts it with `cfg.noise`, seeding both from `seed`.
pub fn generate_noisy_scene(cfg: &SynthConfig, seed: u64) -> Result<Scene> {
    let scene = generate_scene(cfg, seed)?;
    if cfg.noise.is_zero() {
        return Ok(scene);
    }
    let (corners, masks) = corrupt(
        &scene.corners,
        &scene.masks,
        &cfg.noise,
        (cfg.image_width, cfg.image_height),
        (cfg.short_side_min, cfg.short_side_max),
        seed,
    )?;
    Ok(Scene {
        annotation: scene.annotation,
        corners,
        masks,
    })
}
