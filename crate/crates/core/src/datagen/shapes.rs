//! Procedural shape families and small geometry helpers.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Names of the shape families, indexed by class id.
pub const SHAPE_NAMES: [&str; 8] = [
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "parallel-planes",
    "helix",
    "cross-slabs",
];

pub const NUM_SHAPES: usize = SHAPE_NAMES.len();

/// Per-instance variation applied before normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeJitter {
    /// Per-axis scale factors are drawn from `1 +- scale`.
    pub scale: f64,
    /// Maximum tilt (radians) about the x and y axes.
    pub tilt: f64,
    /// Rotation about the vertical axis is uniform on `[-yaw, yaw]`.
    pub yaw: f64,
    /// Standard deviation of per-point Gaussian noise.
    pub point_noise: f64,
}

impl Default for ShapeJitter {
    fn default() -> Self {
        Self {
            scale: 0.3,
            tilt: PI / 6.0,
            yaw: PI,
            point_noise: 0.02,
        }
    }
}

fn normal3<R: Rng + ?Sized>(rng: &mut R) -> Point {
    [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ]
}

fn unit_sphere_point<R: Rng + ?Sized>(rng: &mut R) -> Point {
    loop {
        let p = normal3(rng);
        let n = norm(&p);
        if n > 1e-12 {
            return [p[0] / n, p[1] / n, p[2] / n];
        }
    }
}

pub fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn sample_canonical<R: Rng + ?Sized>(class: usize, rng: &mut R) -> Point {
    match class {
        0 => unit_sphere_point(rng),
        1 => {
            let face = rng.random_range(0..6);
            let u = rng.random_range(-1.0..1.0);
            let v = rng.random_range(-1.0..1.0);
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            }
        }
        2 => {
            let (r, h) = (0.6, 2.0);
            let lateral = TAU * r * h;
            let caps = 2.0 * PI * r * r;
            let a = rng.random_range(0.0..TAU);
            if rng.random_range(0.0..lateral + caps) < lateral {
                [r * a.cos(), r * a.sin(), rng.random_range(-1.0..1.0)]
            } else {
                let rr = r * rng.random::<f64>().sqrt();
                let z = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                [rr * a.cos(), rr * a.sin(), z]
            }
        }
        3 => {
            let (r, h): (f64, f64) = (0.8, 2.0);
            let slant = (r * r + h * h).sqrt();
            let lateral = PI * r * slant;
            let base = PI * r * r;
            let a = rng.random_range(0.0..TAU);
            if rng.random_range(0.0..lateral + base) < lateral {
                let t = rng.random::<f64>().sqrt();
                [r * t * a.cos(), r * t * a.sin(), 1.0 - h * t]
            } else {
                let rr = r * rng.random::<f64>().sqrt();
                [rr * a.cos(), rr * a.sin(), -1.0]
            }
        }
        4 => {
            let (big, small) = (0.7, 0.25);
            loop {
                let th = rng.random_range(0.0..TAU);
                let ph = rng.random_range(0.0..TAU);
                let accept = (big + small * ph.cos()) / (big + small);
                if rng.random::<f64>() < accept {
                    let ring = big + small * ph.cos();
                    return [ring * th.cos(), ring * th.sin(), small * ph.sin()];
                }
            }
        }
        5 => {
            let z = if rng.random_bool(0.5) { 0.4 } else { -0.4 };
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), z]
        }
        6 => {
            let turns = 2.5;
            let t: f64 = rng.random_range(0.0..1.0);
            let a = TAU * turns * t;
            let tube = normal3(rng);
            [
                0.6 * a.cos() + 0.04 * tube[0],
                0.6 * a.sin() + 0.04 * tube[1],
                -1.0 + 2.0 * t + 0.04 * tube[2],
            ]
        }
        _ => {
            let u = rng.random_range(-1.0..1.0);
            let thin = rng.random_range(-0.08..0.08);
            let z = rng.random_range(-1.0..1.0);
            if rng.random_bool(0.5) {
                [u, thin, z]
            } else {
                [thin, u, z]
            }
        }
    }
}

/// Rotation matrix `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_matrix(roll: f64, pitch: f64, yaw: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = roll.sin_cos();
    let (sb, cb) = pitch.sin_cos();
    let (sc, cc) = yaw.sin_cos();
    [
        [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

pub fn rotate(points: &mut [Point], m: &[[f64; 3]; 3]) {
    for p in points.iter_mut() {
        let q = *p;
        for (i, row) in m.iter().enumerate() {
            p[i] = row[0] * q[0] + row[1] * q[1] + row[2] * q[2];
        }
    }
}

/// Centers on the centroid and scales so the farthest point has norm 1.
pub fn normalize_unit_sphere(points: &mut [Point]) {
    if points.is_empty() {
        return;
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points.iter() {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let mut far: f64 = 0.0;
    for p in points.iter_mut() {
        for k in 0..3 {
            p[k] -= c[k];
        }
        far = far.max(norm(p));
    }
    if far > 0.0 {
        for p in points.iter_mut() {
            for v in p.iter_mut() {
                *v /= far;
            }
        }
    }
}

/// Surface sample of shape family `class` with per-instance jitter,
/// normalized into the unit sphere.
pub fn generate_shape<R: Rng + ?Sized>(
    class: usize,
    n: usize,
    jitter: &ShapeJitter,
    rng: &mut R,
) -> Result<Vec<Point>> {
    if class >= NUM_SHAPES {
        return Err(Error::InvalidArgument(format!(
            "unknown shape class {class} (have {NUM_SHAPES})"
        )));
    }
    let scale: Vec<f64> = (0..3)
        .map(|_| 1.0 + jitter.scale * rng.random_range(-1.0..=1.0))
        .collect();
    let roll = jitter.tilt * rng.random_range(-1.0..=1.0);
    let pitch = jitter.tilt * rng.random_range(-1.0..=1.0);
    let yaw = jitter.yaw * rng.random_range(-1.0..=1.0);
    let mut pts: Vec<Point> = (0..n)
        .map(|_| {
            let p = sample_canonical(class, rng);
            [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]]
        })
        .collect();
    rotate(&mut pts, &rotation_matrix(roll, pitch, yaw));
    if jitter.point_noise > 0.0 {
        for p in pts.iter_mut() {
            let e = normal3(rng);
            for k in 0..3 {
                p[k] += jitter.point_noise * e[k];
            }
        }
    }
    normalize_unit_sphere(&mut pts);
    Ok(pts)
}

/// Adds `N(0, sigma^2)` noise to every coordinate.
pub fn jitter_points<R: Rng + ?Sized>(points: &mut [Point], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    for p in points.iter_mut() {
        let e = normal3(rng);
        for k in 0..3 {
            p[k] += sigma * e[k];
        }
    }
}
