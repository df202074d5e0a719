//! Procedural grayscale scenes: a smooth shaded background with soft blobs
//! and a few flat geometric shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spi_core::Image;

use crate::error::Result;

/// Scene `index` of the family identified by `seed`.
pub fn synthetic_image(width: usize, height: usize, seed: u64, index: usize) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let base = rng.random_range(0.2..0.6);
    let gx = rng.random_range(-0.2..0.2);
    let gy = rng.random_range(-0.2..0.2);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..5))
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                rng.random_range(-0.35..0.35),
            )
        })
        .collect();
    let shapes: Vec<Shape> = (0..rng.random_range(1..4)).map(|_| Shape::random(&mut rng)).collect();

    Ok(Image::from_clipped(width, height, {
        let mut px = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                let u = (c as f64 + 0.5) / width as f64;
                let v = (r as f64 + 0.5) / height as f64;
                let mut val = base + gx * (u - 0.5) + gy * (v - 0.5);
                for &(bx, by, s, a) in &blobs {
                    let d2 = (u - bx).powi(2) + (v - by).powi(2);
                    val += a * (-d2 / (2.0 * s * s)).exp();
                }
                for shape in &shapes {
                    if shape.contains(u, v) {
                        val = shape.level;
                    }
                }
                px.push(val);
            }
        }
        px
    })?
    .0)
}

/// `count` scenes `0..count` of the family `seed`.
pub fn synthetic_images(count: usize, width: usize, height: usize, seed: u64) -> Result<Vec<Image>> {
    (0..count).map(|i| synthetic_image(width, height, seed, i)).collect()
}

enum Kind {
    Rect { half_w: f64, half_h: f64 },
    Ellipse { rx: f64, ry: f64 },
}

struct Shape {
    cx: f64,
    cy: f64,
    angle: f64,
    kind: Kind,
    level: f64,
}

impl Shape {
    fn random(rng: &mut impl Rng) -> Self {
        let kind = if rng.random_bool(0.5) {
            Kind::Rect { half_w: rng.random_range(0.06..0.25), half_h: rng.random_range(0.06..0.25) }
        } else {
            Kind::Ellipse { rx: rng.random_range(0.06..0.25), ry: rng.random_range(0.06..0.25) }
        };
        Self {
            cx: rng.random_range(0.15..0.85),
            cy: rng.random_range(0.15..0.85),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            kind,
            level: rng.random_range(0.0..1.0),
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - self.cx, v - self.cy);
        let (a, b) = (c * du + s * dv, -s * du + c * dv);
        match self.kind {
            Kind::Rect { half_w, half_h } => a.abs() <= half_w && b.abs() <= half_h,
            Kind::Ellipse { rx, ry } => (a / rx).powi(2) + (b / ry).powi(2) <= 1.0,
        }
    }
}
