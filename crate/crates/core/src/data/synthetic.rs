//! Procedural shape dataset.
//!
//! Each class is a geometric shape described by a signed distance field.
//! Images fill the shape with a light random color over a dark textured background;
//! sketches trace its outline with jittered vertices on white.

use std::sync::Arc;

use image::{DynamicImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Item, Source};
use crate::error::{Error, Result};
use crate::tokenizer::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Star,
    Ring,
    ParallelBars,
    Grid,
    TJunction,
    SCurve,
    Diamond,
    Spiral,
}

pub const SHAPES: [ShapeKind; 12] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
    ShapeKind::Star,
    ShapeKind::Ring,
    ShapeKind::ParallelBars,
    ShapeKind::Grid,
    ShapeKind::TJunction,
    ShapeKind::SCurve,
    ShapeKind::Diamond,
    ShapeKind::Spiral,
];

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Star => "star",
            ShapeKind::Ring => "ring",
            ShapeKind::ParallelBars => "parallel-bars",
            ShapeKind::Grid => "grid",
            ShapeKind::TJunction => "t-junction",
            ShapeKind::SCurve => "s-curve",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Spiral => "spiral",
        }
    }
}

type Pt = [f64; 2];

enum Prim {
    Polygon(Vec<Pt>),
    Stroke { points: Vec<Pt>, closed: bool, half_width: f64 },
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (apx - t * abx, apy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

fn edges(points: &[Pt], closed: bool) -> impl Iterator<Item = (Pt, Pt)> + '_ {
    let n = points.len();
    let count = if closed { n } else { n.saturating_sub(1) };
    (0..count).map(move |i| (points[i], points[(i + 1) % n]))
}

impl Prim {
    /// Signed distance, negative inside.
    fn sdf(&self, p: Pt) -> f64 {
        match self {
            Prim::Polygon(v) => {
                let mut d = f64::INFINITY;
                let mut inside = false;
                for (a, b) in edges(v, true) {
                    d = d.min(seg_dist(p, a, b));
                    if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]) {
                        inside = !inside;
                    }
                }
                if inside {
                    -d
                } else {
                    d
                }
            }
            Prim::Stroke { points, closed, half_width } => {
                edges(points, *closed).map(|(a, b)| seg_dist(p, a, b)).fold(f64::INFINITY, f64::min) - half_width
            }
        }
    }

    fn jitter(&mut self, rng: &mut impl Rng, std: f64) {
        let noise = Normal::new(0.0, std).expect("finite std");
        let points = match self {
            Prim::Polygon(v) => v,
            Prim::Stroke { points, .. } => points,
        };
        for p in points {
            p[0] += noise.sample(rng);
            p[1] += noise.sample(rng);
        }
    }
}

fn regular(n: usize, radius: impl Fn(usize) -> f64, phase: f64) -> Vec<Pt> {
    (0..n)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
            [radius(i) * a.cos(), radius(i) * a.sin()]
        })
        .collect()
}

fn bar(a: Pt, b: Pt, half_width: f64) -> Prim {
    Prim::Stroke { points: vec![a, b], closed: false, half_width }
}

fn curve(n: usize, f: impl Fn(f64) -> Pt, half_width: f64) -> Prim {
    Prim::Stroke { points: (0..=n).map(|i| f(i as f64 / n as f64)).collect(), closed: false, half_width }
}

/// Shape geometry in a `[-1, 1]²` frame with y pointing up.
fn geometry(kind: ShapeKind) -> Vec<Prim> {
    use std::f64::consts::{FRAC_PI_2, PI, TAU};
    match kind {
        ShapeKind::Circle => vec![Prim::Polygon(regular(48, |_| 0.6, 0.0))],
        ShapeKind::Square => vec![Prim::Polygon(vec![[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])],
        ShapeKind::Triangle => vec![Prim::Polygon(regular(3, |_| 0.7, FRAC_PI_2))],
        ShapeKind::Cross => {
            let (w, l) = (0.18, 0.65);
            vec![Prim::Polygon(vec![
                [-w, -l],
                [w, -l],
                [w, -w],
                [l, -w],
                [l, w],
                [w, w],
                [w, l],
                [-w, l],
                [-w, w],
                [-l, w],
                [-l, -w],
                [-w, -w],
            ])]
        }
        ShapeKind::Star => vec![Prim::Polygon(regular(10, |i| if i % 2 == 0 { 0.72 } else { 0.3 }, FRAC_PI_2))],
        ShapeKind::Ring => vec![Prim::Stroke { points: regular(48, |_| 0.5, 0.0), closed: true, half_width: 0.14 }],
        ShapeKind::ParallelBars => vec![bar([-0.3, -0.6], [-0.3, 0.6], 0.11), bar([0.3, -0.6], [0.3, 0.6], 0.11)],
        ShapeKind::Grid => {
            let (s, l, w) = (0.27, 0.65, 0.07);
            vec![bar([-s, -l], [-s, l], w), bar([s, -l], [s, l], w), bar([-l, -s], [l, -s], w), bar([-l, s], [l, s], w)]
        }
        ShapeKind::TJunction => vec![bar([-0.6, 0.45], [0.6, 0.45], 0.12), bar([0.0, 0.45], [0.0, -0.65], 0.12)],
        ShapeKind::SCurve => vec![curve(40, |t| [-0.4 * (TAU * t).sin(), 0.6 - 1.2 * t], 0.1)],
        ShapeKind::Diamond => vec![Prim::Polygon(vec![[0.0, -0.7], [0.42, 0.0], [0.0, 0.7], [-0.42, 0.0]])],
        ShapeKind::Spiral => vec![curve(
            120,
            |t| {
                let (r, a) = (0.08 + 0.58 * t, 4.0 * PI * t);
                [r * a.cos(), r * a.sin()]
            },
            0.06,
        )],
    }
}

fn union_sdf(prims: &[Prim], p: Pt) -> f64 {
    prims.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min)
}

/// Similarity transform from image space into shape space.
struct Placement {
    cos: f64,
    sin: f64,
    scale: f64,
    offset: Pt,
}

impl Placement {
    fn random(rng: &mut impl Rng, max_angle_deg: f64, scale: (f64, f64), max_offset: f64) -> Self {
        let angle = rng.random_range(-max_angle_deg..=max_angle_deg).to_radians();
        Placement {
            cos: angle.cos(),
            sin: angle.sin(),
            scale: rng.random_range(scale.0..=scale.1),
            offset: [rng.random_range(-max_offset..=max_offset), rng.random_range(-max_offset..=max_offset)],
        }
    }

    /// Signed distance at an image-space point, in image-space units.
    fn sdf(&self, prims: &[Prim], q: Pt) -> f64 {
        let (x, y) = ((q[0] - self.offset[0]) / self.scale, (q[1] - self.offset[1]) / self.scale);
        let p = [self.cos * x + self.sin * y, -self.sin * x + self.cos * y];
        union_sdf(prims, p) * self.scale
    }
}

const SUBSAMPLES: usize = 3;

/// Fraction of each pixel's subsamples satisfying `inside`.
fn coverage(size: usize, inside: impl Fn(Pt) -> bool) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let n = (SUBSAMPLES * SUBSAMPLES) as f64;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..SUBSAMPLES {
                for sx in 0..SUBSAMPLES {
                    let fx = (px as f64 + (sx as f64 + 0.5) / SUBSAMPLES as f64) / size as f64;
                    let fy = (py as f64 + (sy as f64 + 0.5) / SUBSAMPLES as f64) / size as f64;
                    if inside([2.0 * fx - 1.0, 1.0 - 2.0 * fy]) {
                        hits += 1;
                    }
                }
            }
            out[py * size + px] = hits as f64 / n;
        }
    }
    out
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h * 6.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Smooth value noise in `[-1, 1]` on a `cells×cells` lattice.
fn value_noise(size: usize, cells: usize, rng: &mut impl Rng) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let gy = y as f64 / size as f64 * cells as f64;
        let (iy, ty) = (gy.floor() as usize, gy.fract());
        for x in 0..size {
            let gx = x as f64 / size as f64 * cells as f64;
            let (ix, tx) = (gx.floor() as usize, gx.fract());
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders one sample of `kind` in the given modality.
pub fn render_shape(kind: ShapeKind, modality: Modality, size: usize, rng: &mut impl Rng) -> RgbImage {
    let mut prims = geometry(kind);
    match modality {
        Modality::Image => {
            let place = Placement::random(rng, 8.0, (0.92, 1.05), 0.06);
            // Light foreground on a darker background, whatever the hue.
            let fg = hsv(rng.random(), rng.random_range(0.25..0.6), rng.random_range(0.85..1.0));
            let base = rng.random_range(30.0..90.0);
            let tint = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            let texture = value_noise(size, 8, rng);
            let cover = coverage(size, |q| place.sdf(&prims, q) < 0.0);
            let mut img = RgbImage::new(size as u32, size as u32);
            for (i, px) in img.pixels_mut().enumerate() {
                let grain = rng.random_range(-12.0..12.0);
                let a = cover[i];
                let mut c = [0u8; 3];
                for ch in 0..3 {
                    let bg = base + tint[ch] + 20.0 * texture[i] + grain;
                    c[ch] = to_u8(bg * (1.0 - a) + fg[ch] * a);
                }
                *px = Rgb(c);
            }
            img
        }
        Modality::Sketch => {
            for p in &mut prims {
                p.jitter(rng, 0.025);
            }
            let place = Placement::random(rng, 10.0, (0.85, 1.05), 0.1);
            let half = rng.random_range(0.025..0.045);
            let cover = coverage(size, |q| place.sdf(&prims, q).abs() < half);
            let mut img = RgbImage::new(size as u32, size as u32);
            for (i, px) in img.pixels_mut().enumerate() {
                let v = to_u8(255.0 * (1.0 - cover[i]));
                *px = Rgb([v, v, v]);
            }
            img
        }
    }
}

/// `n_classes` shape classes with `sketches_per` sketches and `images_per`
/// images each, ids `sketches/<class>/NNNN.png` and `images/<class>/NNNN.png`.
pub fn generate_synthetic(
    n_classes: usize,
    sketches_per: usize,
    images_per: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || n_classes > SHAPES.len() {
        return Err(Error::contract(
            "generate_synthetic",
            format!("n_classes must be in 1..={}, got {n_classes}", SHAPES.len()),
        ));
    }
    if size == 0 {
        return Err(Error::contract("generate_synthetic", "size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = &SHAPES[..n_classes];
    let mut items = Vec::new();
    for (modality, dir, count) in
        [(Modality::Sketch, "sketches", sketches_per), (Modality::Image, "images", images_per)]
    {
        let mut names: Vec<_> = kinds.iter().collect();
        names.sort_by_key(|k| k.name());
        for &kind in names {
            for i in 0..count {
                let img = render_shape(kind, modality, size, &mut rng);
                items.push(Item {
                    id: format!("{dir}/{}/{i:04}.png", kind.name()),
                    modality,
                    label: kind.name().to_string(),
                    source: Source::Memory(Arc::new(DynamicImage::ImageRgb8(img))),
                });
            }
        }
    }
    Dataset::new(items, kinds.iter().map(|k| k.name().to_string()).collect())
}
