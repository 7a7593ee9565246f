//! Parametric face renderer.
//!
//! Faces live in a normalized frame `u, v ∈ [-1, 1]` (v grows downward). An
//! [`Identity`] fixes the neutral face; each class contributes a set of dark
//! [`Mark`]s whose extent grows from nothing at intensity 0 to full size at
//! intensity 1. Every mark only darkens, so each pixel is monotone in the
//! intensity.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Fraction of the image half-width covered by the unit face frame.
const FACE_SCALE: f64 = 0.92;
/// Width of the soft edge of a mark, in units of its shape field.
const MARK_EDGE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub face_rx: f64,
    pub face_ry: f64,
    pub skin: f64,
    pub background: f64,
    pub hair_line: f64,
    pub hair_tone: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_rx: f64,
    pub eye_ry: f64,
    pub brow_gap: f64,
    pub brow_len: f64,
    pub brow_tone: f64,
    pub nose_len: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    /// `(u, v, radius, depth)` of small dark blemishes.
    pub moles: Vec<(f64, f64, f64, f64)>,
}

impl Identity {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let face_rx = u(0.6, 0.78);
        let face_ry = u(0.8, 0.95);
        let mut id = Self {
            face_rx,
            face_ry,
            skin: u(0.6, 0.85),
            background: u(0.05, 0.35),
            hair_line: u(-0.85, -0.55),
            hair_tone: u(0.1, 0.4),
            eye_dx: u(0.26, 0.36),
            eye_y: u(-0.28, -0.14),
            eye_rx: u(0.08, 0.12),
            eye_ry: u(0.05, 0.08),
            brow_gap: u(0.13, 0.2),
            brow_len: u(0.12, 0.18),
            brow_tone: u(0.2, 0.45),
            nose_len: u(0.2, 0.32),
            mouth_y: u(0.36, 0.5),
            mouth_w: u(0.2, 0.3),
            moles: Vec::new(),
        };
        let count = rng.random_range(2..6);
        id.moles = (0..count)
            .map(|_| {
                (
                    rng.random_range(-0.6..0.6) * face_rx,
                    rng.random_range(-0.5..0.7) * face_ry,
                    rng.random_range(0.035..0.07),
                    rng.random_range(0.15..0.35),
                )
            })
            .collect();
        id
    }
}

/// Per-image nuisance: translation in pixels, additive illumination and
/// seeded sensor noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub dx: f64,
    pub dy: f64,
    pub illumination: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Nuisance {
    pub fn none() -> Self {
        Self { dx: 0.0, dy: 0.0, illumination: 0.0, noise_std: 0.0, noise_seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// `φ = ‖((u - cu) / ru, (v - cv) / rv)‖`.
    Ellipse { cu: f64, cv: f64, ru: f64, rv: f64 },
    /// A stroke along `dv = curve·du² + slope·du`, `φ = max(|du| / half_len, |dv'| / thick)`.
    Band { cu: f64, cv: f64, half_len: f64, thick: f64, curve: f64, slope: f64 },
}

impl Shape {
    fn field(&self, u: f64, v: f64) -> f64 {
        match *self {
            Shape::Ellipse { cu, cv, ru, rv } => (((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2)).sqrt(),
            Shape::Band { cu, cv, half_len, thick, curve, slope } => {
                let du = u - cu;
                let dv = v - cv - curve * du * du - slope * du;
                (du.abs() / half_len).max(dv.abs() / thick)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mark {
    pub shape: Shape,
    pub depth: f64,
}

impl Mark {
    /// Darkening at intensity `t`; zero everywhere at `t = 0`, non-decreasing in `t`.
    fn coverage(&self, u: f64, v: f64, t: f64) -> f64 {
        self.depth * ((t - self.shape.field(u, v)) / MARK_EDGE).clamp(0.0, 1.0)
    }
}

/// Widening applied to every expression stroke, so that the class signal
/// lives at a coarser scale than identity and sensor detail.
const STROKE_SCALE: f64 = 2.0;

fn band(cu: f64, cv: f64, half_len: f64, thick: f64, curve: f64, slope: f64, depth: f64) -> Mark {
    Mark { shape: Shape::Band { cu, cv, half_len, thick: thick * STROKE_SCALE, curve, slope }, depth }
}

fn ellipse(cu: f64, cv: f64, ru: f64, rv: f64, depth: f64) -> Mark {
    Mark { shape: Shape::Ellipse { cu, cv, ru, rv }, depth }
}

/// Expression marks of `class` placed on the landmarks of `id`.
///
/// Classes 0..7 are hand-designed (anger, disgust, fear, happiness, sadness,
/// surprise, contempt); further classes get seeded random mark sets.
pub fn class_marks(class: usize, id: &Identity) -> Vec<Mark> {
    let brow_v = id.eye_y - id.brow_gap;
    let (ex, ey, my, mw) = (id.eye_dx, id.eye_y, id.mouth_y, id.mouth_w);
    match class {
        0 => vec![
            band(-ex + 0.06, brow_v + 0.04, 0.15, 0.07, 0.0, 0.7, 0.55),
            band(ex - 0.06, brow_v + 0.04, 0.15, 0.07, 0.0, -0.7, 0.55),
            band(0.0, my, mw * 0.9, 0.06, 0.0, 0.0, 0.5),
        ],
        1 => vec![
            ellipse(-0.11, ey + id.nose_len * 0.7, 0.07, 0.12, 0.45),
            ellipse(0.11, ey + id.nose_len * 0.7, 0.07, 0.12, 0.45),
            band(0.0, my - 0.06, mw * 0.8, 0.08, 1.2, 0.0, 0.5),
        ],
        2 => vec![
            ellipse(-ex, ey, id.eye_rx * 1.9, id.eye_ry * 2.6, 0.4),
            ellipse(ex, ey, id.eye_rx * 1.9, id.eye_ry * 2.6, 0.4),
            band(0.0, my + 0.02, mw * 1.3, 0.07, 0.0, 0.0, 0.55),
        ],
        3 => vec![
            band(0.0, my, mw * 1.15, 0.09, -1.8, 0.0, 0.6),
            band(-mw - 0.1, my - 0.14, 0.1, 0.06, 0.0, -1.4, 0.4),
            band(mw + 0.1, my - 0.14, 0.1, 0.06, 0.0, 1.4, 0.4),
        ],
        4 => vec![
            band(0.0, my + 0.04, mw * 1.05, 0.09, 1.8, 0.0, 0.6),
            band(-ex + 0.06, brow_v - 0.02, 0.15, 0.07, 0.0, -0.7, 0.5),
            band(ex - 0.06, brow_v - 0.02, 0.15, 0.07, 0.0, 0.7, 0.5),
        ],
        5 => vec![
            ellipse(0.0, my + 0.03, 0.14, 0.2, 0.65),
            band(-ex, brow_v - 0.1, id.brow_len * 1.2, 0.06, -0.8, 0.0, 0.45),
            band(ex, brow_v - 0.1, id.brow_len * 1.2, 0.06, -0.8, 0.0, 0.45),
        ],
        6 => vec![
            band(mw * 0.6, my - 0.03, mw * 0.7, 0.07, 0.0, -0.8, 0.6),
            ellipse(mw + 0.12, my - 0.06, 0.07, 0.07, 0.45),
        ],
        k => {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_indexed(0, "class-marks", k as u64));
            let n = rng.random_range(2..4);
            (0..n)
                .map(|_| {
                    let cu = rng.random_range(-0.45..0.45);
                    let cv = rng.random_range(-0.45..0.6);
                    if rng.random_bool(0.5) {
                        ellipse(cu, cv, rng.random_range(0.06..0.16), rng.random_range(0.06..0.16), 0.5)
                    } else {
                        band(cu, cv, rng.random_range(0.1..0.3), 0.07, rng.random_range(-1.5..1.5), rng.random_range(-0.8..0.8), 0.5)
                    }
                })
                .collect()
        }
    }
}

fn soft_inside(field: f64, edge: f64) -> f64 {
    ((1.0 - field) / edge + 0.5).clamp(0.0, 1.0)
}

/// Neutral face value at face coordinates `(u, v)`.
fn neutral(id: &Identity, u: f64, v: f64) -> f64 {
    let face = ((u / id.face_rx).powi(2) + (v / id.face_ry).powi(2)).sqrt();
    let inside = soft_inside(face, 0.08);
    let mut face_val = id.skin;
    if v < id.hair_line * id.face_ry {
        face_val = id.hair_tone;
    }
    for side in [-1.0, 1.0] {
        let e = (((u - side * id.eye_dx) / id.eye_rx).powi(2) + ((v - id.eye_y) / id.eye_ry).powi(2)).sqrt();
        face_val -= 0.55 * soft_inside(e, 0.3);
        let brow = Shape::Band {
            cu: side * id.eye_dx,
            cv: id.eye_y - id.brow_gap,
            half_len: id.brow_len,
            thick: 0.035,
            curve: -0.8,
            slope: 0.0,
        };
        face_val -= (id.skin - id.brow_tone) * soft_inside(brow.field(u, v), 0.35);
    }
    // The nose is a vertical stroke.
    let nose_v = id.eye_y + id.nose_len / 2.0;
    let nose = ((v - nose_v).abs() / (id.nose_len / 2.0)).max(u.abs() / 0.025);
    face_val -= 0.2 * soft_inside(nose, 0.4);
    let mouth = Shape::Band { cu: 0.0, cv: id.mouth_y, half_len: id.mouth_w, thick: 0.03, curve: 0.0, slope: 0.0 };
    face_val -= 0.3 * soft_inside(mouth.field(u, v), 0.35);
    for &(mu, mv, r, depth) in &id.moles {
        let d2 = ((u - mu).powi(2) + (v - mv).powi(2)) / (r * r);
        face_val -= depth * (-d2).exp();
    }
    id.background + inside * (face_val - id.background)
}

/// Renders a `side × side` image (row-major, values in `[0, 1]`).
pub fn render(class: usize, id: &Identity, t: f64, nuisance: &Nuisance, side: usize) -> Vec<f64> {
    let marks = class_marks(class, id);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(nuisance.noise_seed);
    let noise = Normal::new(0.0, nuisance.noise_std.max(0.0)).expect("finite std");
    let half = side as f64 / 2.0;
    let mut out = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let u = ((px as f64 + 0.5 - nuisance.dx) / half - 1.0) / FACE_SCALE;
            let v = ((py as f64 + 0.5 - nuisance.dy) / half - 1.0) / FACE_SCALE;
            let mut val = neutral(id, u, v);
            for m in &marks {
                val -= m.coverage(u, v, t);
            }
            val += nuisance.illumination;
            if nuisance.noise_std > 0.0 {
                val += noise.sample(&mut noise_rng);
            }
            out.push(val.clamp(0.0, 1.0));
        }
    }
    out
}
