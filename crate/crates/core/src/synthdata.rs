//! Procedural try-on scenes with exactly known garment deformation.
//!
//! Geometry is laid out in a 48×64 design space and scaled to the target
//! resolution. The model is the canonical layout sampled through a smooth
//! displacement field `d` made of Gaussian bumps placed at the deformed
//! shoulder and hip joints, so pixel `p` of the model shows canonical point
//! `p + d(p)` and the ground-truth flow is `d` itself.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::{self, dequantize, quantize};
use crate::sample::{
    one_hot_from_labels, prior, TryOnSample, BODY_PART_CLASSES, CLOTHING_CLASSES, GARMENT_CLASS,
    POSE_CHANNELS,
};
use crate::tensor::Tensor;
use crate::warp::{warp_with_flow, FlowField};

const DESIGN_W: f64 = 48.0;
const DESIGN_H: f64 = 64.0;
/// Texture extends this many pixels past the garment outline so bilinear taps
/// around any interior sample read texture, never background.
const TEXTURE_MARGIN: f64 = 1.5;
const HEATMAP_SIGMA: f64 = 1.5;
const SLEEVE_HALF_WIDTH: f64 = 3.5;
const MAX_AMPLITUDE_RATIO: f64 = 0.6;
/// Index offset separating held-out samples from training samples.
pub const HELD_OUT_OFFSET: u64 = 1 << 32;
pub const MANIFEST: &str = "manifest.txt";

type Pt = (f64, f64);

fn add(a: Pt, b: Pt) -> Pt {
    (a.0 + b.0, a.1 + b.1)
}

fn sub(a: Pt, b: Pt) -> Pt {
    (a.0 - b.0, a.1 - b.1)
}

fn mul(a: Pt, s: f64) -> Pt {
    (a.0 * s, a.1 * s)
}

fn norm(a: Pt) -> f64 {
    a.0.hypot(a.1)
}

fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let ab = sub(b, a);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * ab.0 + (p.1 - a.1) * ab.1) / len2).clamp(0.0, 1.0)
    };
    norm(sub(p, add(a, mul(ab, t))))
}

fn inside_polygon(p: Pt, poly: &[Pt]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Maximum joint displacement in design pixels.
    pub amplitude: f64,
    /// Width of each displacement bump in design pixels.
    pub sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 48,
            amplitude: 4.0,
            sigma: 7.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 12 {
            return Err(Error::Config(format!(
                "resolution {}×{} is below the 16×12 minimum",
                self.height, self.width
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("invalid deformation width {}", self.sigma)));
        }
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0)
            || self.amplitude > MAX_AMPLITUDE_RATIO * self.sigma
        {
            return Err(Error::Config(format!(
                "invalid amplitude {}: must lie in [0, {}]",
                self.amplitude,
                MAX_AMPLITUDE_RATIO * self.sigma
            )));
        }
        Ok(())
    }

    fn scale(&self) -> Pt {
        (self.width as f64 / DESIGN_W, self.height as f64 / DESIGN_H)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
    Glyph,
}

#[derive(Clone, Debug)]
pub struct TextureSpec {
    pub pattern: Pattern,
    pub base: [f64; 3],
    pub accent: [f64; 3],
    /// Spatial period in design pixels (stripes, checker).
    pub period: f64,
    pub angle: f64,
    pub phase: f64,
    /// Gradient direction and strength for the solid pattern.
    pub tilt: Pt,
    /// Gaussian blobs `(center, radius)` for the glyph pattern.
    pub blobs: Vec<(Pt, f64)>,
}

impl TextureSpec {
    fn random(rng: &mut ChaCha8Rng, body: &Body) -> Self {
        let pattern = match rng.gen_range(0..4) {
            0 => Pattern::Solid,
            1 => Pattern::Stripes,
            2 => Pattern::Checker,
            _ => Pattern::Glyph,
        };
        let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
        let accent = base.map(|c| (1.0 - c + rng.gen_range(-0.1..0.1)).clamp(0.05, 0.95));
        let blobs = (0..rng.gen_range(2..=3))
            .map(|_| {
                let c = (
                    body.cx + rng.gen_range(-5.0..5.0),
                    body.shoulder_y + rng.gen_range(4.0..16.0),
                );
                (c, rng.gen_range(2.0..3.0))
            })
            .collect();
        Self {
            pattern,
            base,
            accent,
            period: rng.gen_range(8.0..12.0),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            tilt: (rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)),
            blobs,
        }
    }

    fn eval(&self, q: Pt) -> [f64; 3] {
        let tau = std::f64::consts::TAU;
        let mix = match self.pattern {
            Pattern::Solid => {
                let t = self.tilt.0 * (q.0 - 24.0) + self.tilt.1 * (q.1 - 30.0);
                return self.base.map(|c| (c + t).clamp(0.0, 1.0));
            }
            Pattern::Stripes => {
                let s = q.0 * self.angle.cos() + q.1 * self.angle.sin();
                0.5 + 0.5 * (tau * s / self.period + self.phase).sin()
            }
            Pattern::Checker => {
                let (c, s) = (self.angle.cos(), self.angle.sin());
                let (u, v) = (q.0 * c + q.1 * s, -q.0 * s + q.1 * c);
                0.5 + 0.5 * (tau * u / self.period + self.phase).sin() * (tau * v / self.period).sin()
            }
            Pattern::Glyph => self
                .blobs
                .iter()
                .map(|&(c, r)| {
                    let d2 = (q.0 - c.0).powi(2) + (q.1 - c.1).powi(2);
                    (-d2 / (2.0 * r * r)).exp()
                })
                .sum::<f64>()
                .min(1.0),
        };
        std::array::from_fn(|i| self.base[i] + (self.accent[i] - self.base[i]) * mix)
    }
}

/// Canonical body layout in design space.
#[derive(Clone, Debug)]
pub struct Body {
    pub cx: f64,
    /// Shoulder half-width.
    pub sw: f64,
    pub shoulder_y: f64,
    pub hem: f64,
    /// Fraction of the upper arm covered by the sleeve.
    pub sleeve_t: f64,
    pub elbow_dx: f64,
    pub head_r: f64,
    pub head_y: f64,
    pub leg_gap: f64,
}

/// Image-left is `-1`, image-right is `+1`.
const SIDES: [f64; 2] = [-1.0, 1.0];

impl Body {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            cx: 24.0 + rng.gen_range(-1.0..1.0),
            sw: 10.0 + rng.gen_range(-1.0..1.0),
            shoulder_y: 19.5 + rng.gen_range(-0.7..0.7),
            hem: 42.0 + rng.gen_range(-1.5..1.5),
            sleeve_t: rng.gen_range(0.45..0.7),
            elbow_dx: 3.5 + rng.gen_range(-1.0..1.0),
            head_r: 5.5 + rng.gen_range(-0.4..0.4),
            head_y: 9.5 + rng.gen_range(-0.5..0.5),
            leg_gap: 5.0 + rng.gen_range(-0.7..0.7),
        }
    }

    fn shoulder(&self, side: f64) -> Pt {
        (self.cx + side * self.sw, self.shoulder_y)
    }

    fn elbow(&self, side: f64) -> Pt {
        add(self.shoulder(side), (side * self.elbow_dx, 12.0))
    }

    fn wrist(&self, side: f64) -> Pt {
        add(self.elbow(side), (side * 1.5, 10.5))
    }

    fn hip(&self, side: f64) -> Pt {
        (self.cx + side * self.leg_gap, self.hem - 1.0)
    }

    fn knee(&self, side: f64) -> Pt {
        (self.cx + side * (self.leg_gap + 0.5), self.hem + 9.5)
    }

    fn ankle(&self, side: f64) -> Pt {
        (self.cx + side * (self.leg_gap + 0.5), (self.hem + 19.0).min(61.5))
    }

    /// Pose joints in heatmap channel order; the last four channels (eyes and
    /// ears) have no synthetic counterpart.
    pub fn joints(&self) -> [Option<Pt>; POSE_CHANNELS] {
        let mut j = [None; POSE_CHANNELS];
        j[0] = Some((self.cx, self.head_y + 1.0));
        j[1] = Some((self.cx, self.shoulder_y - 3.0));
        for (base, side) in [(2, -1.0), (5, 1.0)] {
            j[base] = Some(self.shoulder(side));
            j[base + 1] = Some(self.elbow(side));
            j[base + 2] = Some(self.wrist(side));
        }
        for (base, side) in [(8, -1.0), (11, 1.0)] {
            j[base] = Some(self.hip(side));
            j[base + 1] = Some(self.knee(side));
            j[base + 2] = Some(self.ankle(side));
        }
        j
    }

    /// Joints that anchor displacement bumps: both shoulders and both hips.
    fn anchor_joints(&self) -> [Pt; 4] {
        [self.shoulder(-1.0), self.shoulder(1.0), self.hip(-1.0), self.hip(1.0)]
    }

    pub fn garment_polygon(&self) -> Vec<Pt> {
        let mut sides: Vec<[Pt; 6]> = Vec::with_capacity(2);
        for side in SIDES {
            let sj = self.shoulder(side);
            let arm = sub(self.elbow(side), sj);
            let u = mul(arm, 1.0 / norm(arm));
            let n = (side * u.1, -side * u.0);
            let along = add(sj, mul(u, self.sleeve_t * norm(arm)));
            sides.push([
                (self.cx + side * 3.0, self.shoulder_y - 2.5),
                add(sj, mul(n, SLEEVE_HALF_WIDTH)),
                add(along, mul(n, SLEEVE_HALF_WIDTH)),
                sub(along, mul(n, SLEEVE_HALF_WIDTH)),
                (self.cx + side * (self.sw - 3.0), self.shoulder_y + 8.0),
                (self.cx + side * (self.sw - 2.5), self.hem),
            ]);
        }
        let mut poly: Vec<Pt> = sides[0].to_vec();
        poly.extend(sides[1].iter().rev());
        poly.push((self.cx, self.shoulder_y + 0.5));
        poly
    }

    fn in_head(&self, q: Pt) -> bool {
        norm(sub(q, (self.cx, self.head_y))) <= self.head_r
    }

    fn in_neck(&self, q: Pt) -> bool {
        (q.0 - self.cx).abs() <= 2.0 && q.1 >= self.head_y && q.1 <= self.shoulder_y + 1.0
    }

    fn in_torso(&self, q: Pt) -> bool {
        (q.0 - self.cx).abs() <= self.sw - 3.5 && q.1 >= self.shoulder_y - 1.0 && q.1 <= self.hem
    }

    fn in_hips(&self, q: Pt) -> bool {
        (q.0 - self.cx).abs() <= self.sw - 2.5 && q.1 >= self.hem - 2.0 && q.1 <= self.hem + 4.0
    }

    fn in_upper_arm(&self, q: Pt, side: f64) -> bool {
        segment_distance(q, self.shoulder(side), self.elbow(side)) <= 2.6
    }

    fn in_lower_arm(&self, q: Pt, side: f64) -> bool {
        segment_distance(q, self.elbow(side), self.wrist(side)) <= 2.2
    }

    fn in_upper_leg(&self, q: Pt, side: f64) -> bool {
        segment_distance(q, self.hip(side), self.knee(side)) <= 3.2
    }

    fn in_lower_leg(&self, q: Pt, side: f64) -> bool {
        segment_distance(q, self.knee(side), self.ankle(side)) <= 2.8
    }

    fn in_arm(&self, q: Pt, side: f64) -> bool {
        self.in_upper_arm(q, side) || self.in_lower_arm(q, side)
    }

    fn in_legs(&self, q: Pt) -> bool {
        self.in_hips(q)
            || SIDES
                .iter()
                .any(|&s| self.in_upper_leg(q, s) || self.in_lower_leg(q, s))
    }

    /// Clothing classes: 0 background, 1 garment, 2 head, 3 lower body,
    /// 4 image-left arm skin, 5 image-right arm skin, 6 neck skin.
    fn clothing_label(&self, q: Pt, garment: bool) -> u8 {
        if self.in_head(q) {
            2
        } else if garment {
            GARMENT_CLASS as u8
        } else if self.in_neck(q) {
            6
        } else if self.in_arm(q, -1.0) {
            4
        } else if self.in_arm(q, 1.0) {
            5
        } else if self.in_legs(q) || self.in_torso(q) {
            3
        } else {
            0
        }
    }

    /// Body parts: 0 background, 1 head and neck, 2 torso, 3/4 upper arms,
    /// 5/6 lower arms, 7/8 upper legs, 9/10 lower legs (image-left first).
    fn body_part(&self, q: Pt, garment: bool) -> u8 {
        if self.in_head(q) || self.in_neck(q) {
            return 1;
        }
        for (i, side) in SIDES.into_iter().enumerate() {
            if self.in_upper_arm(q, side) {
                return 3 + i as u8;
            }
        }
        for (i, side) in SIDES.into_iter().enumerate() {
            if self.in_lower_arm(q, side) {
                return 5 + i as u8;
            }
        }
        if self.in_torso(q) || self.in_hips(q) {
            return 2;
        }
        for (i, side) in SIDES.into_iter().enumerate() {
            if self.in_upper_leg(q, side) {
                return 7 + i as u8;
            }
            if self.in_lower_leg(q, side) {
                return 9 + i as u8;
            }
        }
        if garment {
            let sleeve = q.1 < self.shoulder_y + 8.0 && (q.0 - self.cx).abs() > self.sw - 3.5;
            return match (sleeve, q.0 < self.cx) {
                (true, true) => 3,
                (true, false) => 4,
                _ => 2,
            };
        }
        0
    }
}

#[derive(Clone, Debug)]
pub struct Bump {
    pub center: Pt,
    pub amplitude: Pt,
}

/// Everything needed to render one sample deterministically.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub seed: u64,
    pub index: u64,
    pub body: Body,
    pub texture: TextureSpec,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub pants: [f64; 3],
    pub background: [f64; 3],
    pub bumps: Vec<Bump>,
    pub sigma: f64,
}

impl SceneSpec {
    pub fn random(cfg: &SynthConfig, seed: u64, index: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let body = Body::random(&mut rng);
        let texture = TextureSpec::random(&mut rng, &body);
        let tone = rng.gen_range(0.45..0.9);
        let skin = [tone, tone * 0.78, tone * 0.62];
        let hair: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.35));
        let pants: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.6));
        let bg = rng.gen_range(0.8..0.95);
        let bumps = body
            .anchor_joints()
            .into_iter()
            .map(|j| {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = cfg.amplitude * rng.gen_range(0.0f64..1.0).sqrt();
                let delta = (r * theta.cos(), r * theta.sin());
                Bump {
                    center: add(j, delta),
                    amplitude: mul(delta, -1.0),
                }
            })
            .collect();
        Ok(Self {
            seed,
            index,
            body,
            texture,
            skin,
            hair,
            pants,
            background: [bg, bg, bg * 0.97],
            bumps,
            sigma: cfg.sigma,
        })
    }

    /// Displacement at a design-space point.
    pub fn displacement(&self, q: Pt) -> Pt {
        let s2 = 2.0 * self.sigma * self.sigma;
        self.bumps.iter().fold((0.0, 0.0), |acc, b| {
            let d = sub(q, b.center);
            let g = (-(d.0 * d.0 + d.1 * d.1) / s2).exp();
            add(acc, mul(b.amplitude, g))
        })
    }

    /// Model-space position of a canonical point: solves `p + d(p) = q`.
    fn deformed_position(&self, q: Pt) -> Pt {
        let mut p = q;
        for _ in 0..50 {
            p = sub(q, self.displacement(p));
        }
        p
    }

    fn check_invertible(&self, cfg: &SynthConfig) -> Result<()> {
        let (sx, sy) = cfg.scale();
        let e = 1e-3;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let q = (x as f64 / sx, y as f64 / sy);
                let dx = sub(self.displacement((q.0 + e, q.1)), self.displacement((q.0 - e, q.1)));
                let dy = sub(self.displacement((q.0, q.1 + e)), self.displacement((q.0, q.1 - e)));
                let (a, b) = (1.0 + dx.0 / (2.0 * e), dy.0 / (2.0 * e));
                let (c, d) = (dx.1 / (2.0 * e), 1.0 + dy.1 / (2.0 * e));
                if a * d - b * c <= 0.1 {
                    return Err(Error::Config(format!(
                        "deformation is not invertible near pixel ({x}, {y})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn head_color(&self, q: Pt) -> [f64; 3] {
        if q.1 < self.body.head_y - 0.25 * self.body.head_r {
            self.hair
        } else {
            self.skin
        }
    }

    fn color(&self, label: u8, q: Pt) -> [f64; 3] {
        match label {
            0 => self.background,
            1 => self.texture.eval(q),
            2 => self.head_color(q),
            3 => {
                let shade = 1.0 - 0.1 * ((q.1 - self.body.hem) / 20.0).clamp(0.0, 1.0);
                self.pants.map(|c| c * shade)
            }
            _ => self.skin,
        }
    }

    pub fn render(&self, cfg: &SynthConfig) -> Result<TryOnSample> {
        cfg.validate()?;
        self.check_invertible(cfg)?;
        let (h, w) = (cfg.height, cfg.width);
        let plane = h * w;
        let (sx, sy) = cfg.scale();
        let poly = self.body.garment_polygon();
        let poly_px: Vec<Pt> = poly.iter().map(|p| (p.0 * sx, p.1 * sy)).collect();
        let near_outline = |p: Pt| {
            (0..poly_px.len()).any(|i| {
                segment_distance(p, poly_px[i], poly_px[(i + 1) % poly_px.len()]) <= TEXTURE_MARGIN
            })
        };

        let mut garment = vec![0f32; 3 * plane];
        let mut garment_mask = vec![0f32; plane];
        let mut model = vec![0f32; 3 * plane];
        let mut model_mask = vec![0f32; plane];
        let mut clothing = vec![0u8; plane];
        let mut parts = vec![0u8; plane];
        let mut uv = vec![0f32; 2 * plane];
        let mut flow = vec![0f32; 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let p = (x as f64, y as f64);
                let q0 = (p.0 / sx, p.1 / sy);

                let inside = inside_polygon(q0, &poly);
                garment_mask[i] = inside as u8 as f32;
                let flat = if inside || near_outline(p) {
                    self.texture.eval(q0)
                } else {
                    [1.0; 3]
                };
                for c in 0..3 {
                    garment[c * plane + i] = dequantize(quantize(flat[c] as f32));
                }

                let d = self.displacement(q0);
                let q = add(q0, d);
                let worn = inside_polygon(q, &poly);
                let label = self.body.clothing_label(q, worn);
                clothing[i] = label;
                parts[i] = self.body.body_part(q, worn);
                let col = self.color(label, q);
                for c in 0..3 {
                    model[c * plane + i] = dequantize(quantize(col[c] as f32));
                }
                if label == GARMENT_CLASS as u8 {
                    model_mask[i] = 1.0;
                    flow[i] = (d.0 * sx) as f32;
                    flow[plane + i] = (d.1 * sy) as f32;
                }
                if label != 0 {
                    uv[i] = (q.0 / DESIGN_W).clamp(0.0, 1.0) as f32;
                    uv[plane + i] = (q.1 / DESIGN_H).clamp(0.0, 1.0) as f32;
                }
            }
        }

        let joints = self.body.joints();
        let s2 = 2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA;
        let mut pose = vec![0f32; POSE_CHANNELS * plane];
        for (ch, j) in joints.iter().enumerate() {
            let Some(j) = j else { continue };
            let m = self.deformed_position(*j);
            for y in 0..h {
                for x in 0..w {
                    let q = (x as f64 / sx, y as f64 / sy);
                    let d2 = (q.0 - m.0).powi(2) + (q.1 - m.1).powi(2);
                    pose[ch * plane + y * w + x] = dequantize(quantize((-d2 / s2).exp() as f32));
                }
            }
        }
        let silhouette: Vec<f32> = clothing.iter().map(|&l| (l != 0) as u8 as f32).collect();

        let model = Tensor::new(vec![3, h, w], model)?;
        let pose = Tensor::new(vec![POSE_CHANNELS, h, w], pose)?;
        let silhouette = Tensor::new(vec![1, h, w], silhouette)?;
        assemble(Parts {
            garment: Tensor::new(vec![3, h, w], garment)?,
            garment_mask: Tensor::new(vec![1, h, w], garment_mask)?,
            model,
            model_garment_mask: Tensor::new(vec![1, h, w], model_mask)?,
            clothing,
            body_parts: parts,
            silhouette,
            pose,
            uv: Tensor::new(vec![2, h, w], uv)?,
            gt_flow: Some(FlowField::new(Tensor::new(vec![2, h, w], flow)?)?),
        })
    }
}

/// The stored components of a sample; everything else is derived from these.
struct Parts {
    garment: Tensor<f32>,
    garment_mask: Tensor<f32>,
    model: Tensor<f32>,
    model_garment_mask: Tensor<f32>,
    clothing: Vec<u8>,
    body_parts: Vec<u8>,
    silhouette: Tensor<f32>,
    pose: Tensor<f32>,
    uv: Tensor<f32>,
    gt_flow: Option<FlowField<f32>>,
}

fn assemble(p: Parts) -> Result<TryOnSample> {
    let (_, h, w) = p.model.dims3()?;
    let plane = h * w;
    let clothing_seg = one_hot_from_labels(&p.clothing, CLOTHING_CLASSES, h, w)?;
    let body_parts = one_hot_from_labels(&p.body_parts, BODY_PART_CLASSES, h, w)?;
    let head = Tensor::from_fn(&[3, h, w], |i| {
        if p.clothing[i % plane] == 2 {
            p.model.data()[i]
        } else {
            0.0
        }
    });
    let priors = Tensor::concat_channels(&[&p.silhouette, &p.pose, &head, &body_parts])?;
    debug_assert_eq!(priors.shape()[0] - BODY_PART_CLASSES, prior::BODY_PARTS);
    let sample = TryOnSample {
        garment: p.garment,
        garment_mask: p.garment_mask,
        model: p.model,
        model_garment_mask: p.model_garment_mask,
        priors,
        clothing_seg,
        body_parts,
        uv: p.uv,
        gt_flow: p.gt_flow,
    };
    sample.validate()?;
    Ok(sample)
}

pub fn generate_one(cfg: &SynthConfig, seed: u64, index: u64) -> Result<TryOnSample> {
    SceneSpec::random(cfg, seed, index)?.render(cfg)
}

/// Samples `start..start + count`, each from its own seeded stream.
pub fn generate(cfg: &SynthConfig, seed: u64, start: u64, count: usize) -> Result<Vec<TryOnSample>> {
    if count == 0 {
        return Err(Error::Config("sample count must be ≥ 1".into()));
    }
    cfg.validate()?;
    (start..start + count as u64)
        .into_par_iter()
        .map(|i| generate_one(cfg, seed, i))
        .collect()
}

/// Mean absolute difference between the flat garment warped by the
/// ground-truth flow and the model image, over the worn-garment region.
pub fn self_consistency_l1(s: &TryOnSample) -> Result<f64> {
    let flow = s
        .gt_flow
        .as_ref()
        .ok_or_else(|| Error::contract("self_consistency", "sample has no ground-truth flow"))?;
    let warped = warp_with_flow(&s.garment, flow)?;
    let plane = s.height() * s.width();
    let mask = s.model_garment_mask.data();
    let (mut total, mut n) = (0.0f64, 0usize);
    for c in 0..3 {
        for (p, &m) in mask.iter().enumerate() {
            if m >= 0.5 {
                total += (warped.data()[c * plane + p] - s.model.data()[c * plane + p]).abs() as f64;
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

fn labels_of(t: &Tensor<f32>) -> Result<Vec<u8>> {
    Ok(crate::metrics::labels(t)?.into_iter().map(|l| l as u8).collect())
}

const ROLES: [&str; 10] = [
    "garment",
    "garment_mask",
    "model",
    "model_garment_mask",
    "clothing_seg",
    "body_parts",
    "silhouette",
    "pose",
    "uv",
    "gt_flow",
];

fn file_name(role: &str) -> &'static str {
    match role {
        "garment" => "garment.ppm",
        "garment_mask" => "garment_mask.pgm",
        "model" => "model.ppm",
        "model_garment_mask" => "model_garment_mask.pgm",
        "clothing_seg" => "clothing_seg.pgm",
        "body_parts" => "body_parts.pgm",
        "silhouette" => "silhouette.pgm",
        "pose" => "pose.pgm",
        "uv" => "uv.zfpl",
        _ => "gt_flow.zfpl",
    }
}

fn encode_role(s: &TryOnSample, role: &str) -> Result<Option<Vec<u8>>> {
    let (h, w) = (s.height(), s.width());
    Ok(Some(match role {
        "garment" => imageio::encode_ppm(&s.garment)?,
        "garment_mask" => imageio::encode_pgm(&s.garment_mask)?,
        "model" => imageio::encode_ppm(&s.model)?,
        "model_garment_mask" => imageio::encode_pgm(&s.model_garment_mask)?,
        "clothing_seg" => imageio::encode_labels(&labels_of(&s.clothing_seg)?, h, w),
        "body_parts" => imageio::encode_labels(&labels_of(&s.body_parts)?, h, w),
        "silhouette" => imageio::encode_pgm(&s.priors.channels(prior::SILHOUETTE, 1)?)?,
        "pose" => imageio::encode_pgm(&s.priors.channels(prior::POSE, POSE_CHANNELS)?)?,
        "uv" => imageio::encode_planes(&s.uv)?,
        _ => match &s.gt_flow {
            Some(f) => imageio::encode_planes(f.tensor())?,
            None => return Ok(None),
        },
    }))
}

/// Writes one directory per sample plus a manifest of `path role` lines.
pub fn save_dataset(dir: &Path, samples: &[TryOnSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# gaflow synthetic dataset\n");
    for (i, s) in samples.iter().enumerate() {
        let sub = format!("{i:05}");
        for role in ROLES {
            if let Some(bytes) = encode_role(s, role)? {
                let rel = format!("{sub}/{}", file_name(role));
                imageio::save_bytes(&dir.join(&rel), &bytes)?;
                manifest.push_str(&format!("{rel} {role}\n"));
            }
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Parses the manifest into per-sample role → relative path maps, in order.
pub fn read_manifest(dir: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut groups: Vec<(String, BTreeMap<String, String>)> = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: &str| Error::Format {
            path: path.clone(),
            offset: line_offset,
            detail: detail.to_string(),
        };
        let (rel, role) = line.split_once(' ').ok_or_else(|| bad("expected `path role`"))?;
        if !ROLES.contains(&role) {
            return Err(bad(&format!("unknown role {role}")));
        }
        let key = rel.split('/').next().unwrap_or_default().to_string();
        match groups.last_mut() {
            Some((k, m)) if *k == key => {
                m.insert(role.to_string(), rel.to_string());
            }
            _ => groups.push((key, BTreeMap::from([(role.to_string(), rel.to_string())]))),
        }
    }
    Ok(groups.into_iter().map(|(_, m)| m).collect())
}

fn load_sample(dir: &Path, files: &BTreeMap<String, String>) -> Result<TryOnSample> {
    let bytes = |role: &str| -> Result<(Vec<u8>, std::path::PathBuf)> {
        let rel = files.get(role).ok_or_else(|| {
            Error::Config(format!("manifest entry missing role {role}"))
        })?;
        let path = dir.join(rel);
        Ok((imageio::load_bytes(&path)?, path))
    };
    let ppm = |role: &str| -> Result<Tensor<f32>> {
        let (b, p) = bytes(role)?;
        imageio::decode_ppm(&b, &p)
    };
    let pgm = |role: &str, c: usize| -> Result<Tensor<f32>> {
        let (b, p) = bytes(role)?;
        imageio::decode_pgm(&b, &p, c)
    };
    let labels = |role: &str| -> Result<Vec<u8>> {
        let (b, p) = bytes(role)?;
        Ok(imageio::decode_labels(&b, &p)?.0)
    };
    let planes = |role: &str| -> Result<Tensor<f32>> {
        let (b, p) = bytes(role)?;
        imageio::decode_planes(&b, &p)
    };
    let gt_flow = if files.contains_key("gt_flow") {
        Some(FlowField::new(planes("gt_flow")?)?)
    } else {
        None
    };
    assemble(Parts {
        garment: ppm("garment")?,
        garment_mask: pgm("garment_mask", 1)?,
        model: ppm("model")?,
        model_garment_mask: pgm("model_garment_mask", 1)?,
        clothing: labels("clothing_seg")?,
        body_parts: labels("body_parts")?,
        silhouette: pgm("silhouette", 1)?,
        pose: pgm("pose", POSE_CHANNELS)?,
        uv: planes("uv")?,
        gt_flow,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<TryOnSample>> {
    read_manifest(dir)?
        .iter()
        .map(|files| load_sample(dir, files))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polygon_and_segment_helpers() {
        let square = [(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)];
        assert!(inside_polygon((1.0, 1.0), &square));
        assert!(!inside_polygon((3.0, 1.0), &square));
        assert_eq!(segment_distance((1.0, 1.0), (0.0, 0.0), (2.0, 0.0)), 1.0);
        assert_eq!(segment_distance((3.0, 0.0), (0.0, 0.0), (2.0, 0.0)), 1.0);
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let cfg = SynthConfig {
            amplitude: 0.0,
            ..SynthConfig::default()
        };
        let s = generate_one(&cfg, 3, 0).unwrap();
        let flow = s.gt_flow.as_ref().unwrap();
        assert!(flow.tensor().data().iter().all(|&v| v == 0.0));
        let plane = s.height() * s.width();
        for p in 0..plane {
            if s.model_garment_mask.data()[p] == 1.0 {
                for c in 0..3 {
                    assert_eq!(s.model.data()[c * plane + p], s.garment.data()[c * plane + p]);
                }
            }
        }
        assert_eq!(s.model_garment_mask, s.garment_mask);
    }

    #[test]
    fn samples_are_valid_and_consistent() {
        let cfg = SynthConfig::default();
        for s in generate(&cfg, 11, 0, 6).unwrap() {
            s.validate().unwrap();
            assert!(self_consistency_l1(&s).unwrap() < 0.02);
            let garment = s.clothing_seg.channel(GARMENT_CLASS);
            assert_eq!(garment, s.model_garment_mask.data());
            let flow = s.gt_flow.as_ref().unwrap();
            assert!(flow.tensor().max_abs() > 0.0);
        }
    }

    #[test]
    fn seed_determinism_and_independence() {
        let cfg = SynthConfig::default();
        let a = generate_one(&cfg, 5, 2).unwrap();
        let b = generate_one(&cfg, 5, 2).unwrap();
        let c = generate_one(&cfg, 6, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_amplitude_rejected() {
        for amplitude in [-1.0, f64::NAN, 100.0] {
            let cfg = SynthConfig {
                amplitude,
                ..SynthConfig::default()
            };
            assert!(matches!(generate_one(&cfg, 0, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn other_resolutions_render() {
        let cfg = SynthConfig {
            height: 32,
            width: 24,
            ..SynthConfig::default()
        };
        let s = generate_one(&cfg, 1, 0).unwrap();
        assert_eq!(s.model.shape(), &[3, 32, 24]);
    }

    #[test]
    fn unused_pose_channels_are_zero() {
        let s = generate_one(&SynthConfig::default(), 2, 1).unwrap();
        for ch in 14..18 {
            assert!(s.priors.channel(prior::POSE + ch).iter().all(|&v| v == 0.0));
        }
        assert!(s.priors.channel(prior::POSE).iter().any(|&v| v > 0.9));
    }
}
