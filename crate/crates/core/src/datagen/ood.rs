//! Out-of-distribution generators: cropped scene blocks (weak), rotated and
//! heavily jittered blocks (strong), and crops from perturbed object boxes.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::shapes::{
    generate_shape, jitter_points, normalize_unit_sphere, rotate, rotation_matrix, Point,
    ShapeJitter, NUM_SHAPES,
};
use crate::error::{Error, Result};

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3 {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self> {
        if size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(format!("box sizes must be > 0: {size:?}")));
        }
        Ok(Self { center, size })
    }

    /// Tight box around a non-empty point set.
    pub fn bounding(points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("bounding box of no points"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
        let size = [0, 1, 2].map(|k| (hi[k] - lo[k]).max(1e-9));
        Ok(Self { center, size })
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|k| (p[k] - self.center[k]).abs() <= 0.5 * self.size[k])
    }
}

/// Points inside `bx` (boundary inclusive), in input order.
pub fn crop_box(points: &[Point], bx: &Box3) -> Vec<Point> {
    points.iter().filter(|p| bx.contains(p)).copied().collect()
}

/// Minimum admissible size factor `1 + b`.
pub const MIN_SIZE_FACTOR: f64 = 0.1;

/// Applies `t' = t + alpha_t * l_t`, `l_t' = (1 + b_t) * l_t` per axis.
pub fn perturb_box_with(bx: &Box3, alpha: [f64; 3], b: [f64; 3]) -> Result<Box3> {
    let center = [0, 1, 2].map(|k| bx.center[k] + alpha[k] * bx.size[k]);
    let size = [0, 1, 2].map(|k| (1.0 + b[k]) * bx.size[k]);
    Box3::new(center, size)
}

/// Random box perturbation: per axis an independent shift factor uniform on
/// `[-1, -0.5] U [0.5, 1]` and a size factor `1 + b`, `b ~ N(0, 0.2^2)`,
/// redrawn until `1 + b > MIN_SIZE_FACTOR`.
pub fn perturb_box<R: Rng + ?Sized>(bx: &Box3, rng: &mut R) -> Box3 {
    let size_noise = Normal::new(0.0, 0.2).expect("valid normal");
    let mut alpha = [0.0; 3];
    let mut b = [0.0; 3];
    for k in 0..3 {
        let mag = rng.random_range(0.5..=1.0);
        alpha[k] = if rng.random_bool(0.5) { mag } else { -mag };
        b[k] = loop {
            let v: f64 = size_noise.sample(rng);
            if 1.0 + v > MIN_SIZE_FACTOR {
                break v;
            }
        };
    }
    perturb_box_with(bx, alpha, b).expect("size factor floor keeps sizes positive")
}

/// An in-distribution shape placed in a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub class: usize,
    pub scale: f64,
    pub center: [f64; 3],
}

/// Everything needed to render one scene block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockLayout {
    pub shapes: Vec<PlacedShape>,
    /// Object points outside this box are discarded; `None` keeps all.
    pub clip: Option<Box3>,
    pub noise_fraction: f64,
    pub floor_fraction: f64,
}

/// Point counts by origin for a rendered block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockStats {
    pub object: usize,
    pub floor: usize,
    pub noise: usize,
}

/// Extent of the scene block: `[-1, 1]^2 x [0, 1.5]`.
const BLOCK_HALF: f64 = 1.0;
const BLOCK_HEIGHT: f64 = 1.5;

fn place<R: Rng + ?Sized>(
    s: &PlacedShape,
    n: usize,
    jitter: &ShapeJitter,
    rng: &mut R,
) -> Result<Vec<Point>> {
    let mut pts = generate_shape(s.class, n, jitter, rng)?;
    for p in pts.iter_mut() {
        for k in 0..3 {
            p[k] = p[k] * s.scale + s.center[k];
        }
    }
    Ok(pts)
}

fn floor_point<R: Rng + ?Sized>(rng: &mut R) -> Point {
    [
        rng.random_range(-BLOCK_HALF..BLOCK_HALF),
        rng.random_range(-BLOCK_HALF..BLOCK_HALF),
        0.0,
    ]
}

fn noise_point<R: Rng + ?Sized>(rng: &mut R) -> Point {
    [
        rng.random_range(-BLOCK_HALF..BLOCK_HALF),
        rng.random_range(-BLOCK_HALF..BLOCK_HALF),
        rng.random_range(0.0..BLOCK_HEIGHT),
    ]
}

/// Renders a block with exactly `n` points, normalized into the unit sphere
/// after cropping.
pub fn render_block<R: Rng + ?Sized>(
    layout: &BlockLayout,
    n: usize,
    jitter: &ShapeJitter,
    rng: &mut R,
) -> Result<(Vec<Point>, BlockStats)> {
    if n == 0 {
        return Err(Error::Empty("block with zero points"));
    }
    let mut object_pool = Vec::new();
    for s in &layout.shapes {
        let pts = place(s, n, jitter, rng)?;
        match &layout.clip {
            Some(bx) => object_pool.extend(crop_box(&pts, bx)),
            None => object_pool.extend(pts),
        }
    }
    let noise = ((layout.noise_fraction * n as f64).round() as usize).min(n);
    let mut floor = ((layout.floor_fraction * n as f64).round() as usize).min(n - noise);
    let mut object = n - noise - floor;
    if object_pool.is_empty() {
        floor += object;
        object = 0;
    }
    let mut pts = Vec::with_capacity(n);
    if object == object_pool.len() {
        pts.extend_from_slice(&object_pool);
    } else {
        for _ in 0..object {
            pts.push(object_pool[rng.random_range(0..object_pool.len())]);
        }
    }
    for _ in 0..floor {
        pts.push(floor_point(rng));
    }
    for _ in 0..noise {
        pts.push(noise_point(rng));
    }
    normalize_unit_sphere(&mut pts);
    Ok((pts, BlockStats { object, floor, noise }))
}

/// Draws a random scene block layout: one or two shapes resting on the floor,
/// clipped by a box around one of them, with 10-30% background noise.
pub fn random_block_layout<R: Rng + ?Sized>(rng: &mut R) -> BlockLayout {
    let count = rng.random_range(1..=2);
    let shapes: Vec<PlacedShape> = (0..count)
        .map(|_| {
            let scale = rng.random_range(0.35..0.6);
            PlacedShape {
                class: rng.random_range(0..NUM_SHAPES),
                scale,
                center: [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    scale,
                ],
            }
        })
        .collect();
    let target = &shapes[rng.random_range(0..shapes.len())];
    let clip_center = [0, 1, 2].map(|k| target.center[k] + target.scale * rng.random_range(-0.5..0.5));
    let clip_size = [0, 1, 2].map(|_| 2.0 * target.scale * rng.random_range(0.5..1.2));
    BlockLayout {
        shapes,
        clip: Some(Box3::new(clip_center, clip_size).expect("positive clip size")),
        noise_fraction: rng.random_range(0.1..=0.3),
        floor_fraction: rng.random_range(0.15..0.35),
    }
}

/// One weak-OOD block (points only).
pub fn weak_ood_cloud<R: Rng + ?Sized>(
    n: usize,
    jitter: &ShapeJitter,
    rng: &mut R,
) -> Result<(Vec<Point>, BlockStats)> {
    let layout = random_block_layout(rng);
    render_block(&layout, n, jitter, rng)
}

/// Parameters of the strong-OOD corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongOodSpec {
    /// Per-axis rotation angles are uniform on `[-max_angle, max_angle]`.
    pub max_angle: f64,
    /// Standard deviation of the additive per-coordinate noise.
    pub sigma: f64,
}

impl Default for StrongOodSpec {
    fn default() -> Self {
        Self {
            max_angle: FRAC_PI_2,
            sigma: 1.0,
        }
    }
}

/// Random rotation with independent per-axis angles followed by Gaussian
/// jitter. The result is not renormalized.
pub fn corrupt_strong<R: Rng + ?Sized>(points: &mut [Point], spec: &StrongOodSpec, rng: &mut R) {
    let a = spec.max_angle;
    let (rx, ry, rz) = if a > 0.0 {
        (
            rng.random_range(-a..=a),
            rng.random_range(-a..=a),
            rng.random_range(-a..=a),
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    rotate(points, &rotation_matrix(rx, ry, rz));
    jitter_points(points, spec.sigma, rng);
}

/// A scene holding one target object with a known box plus clutter.
#[derive(Clone, Debug)]
pub struct BoxScene {
    pub points: Vec<Point>,
    /// Indices into `points` belonging to the target object.
    pub object: std::ops::Range<usize>,
    pub object_box: Box3,
}

/// Scene with the target object at the origin, one distractor, a floor patch
/// and background noise.
pub fn random_box_scene<R: Rng + ?Sized>(
    n: usize,
    jitter: &ShapeJitter,
    rng: &mut R,
) -> Result<BoxScene> {
    let target = PlacedShape {
        class: rng.random_range(0..NUM_SHAPES),
        scale: rng.random_range(0.35..0.6),
        center: [0.0, 0.0, 0.0],
    };
    let mut target_pts = place(&target, n, jitter, rng)?;
    let lift = target_pts.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    for p in target_pts.iter_mut() {
        p[2] -= lift;
    }
    let object_box = Box3::bounding(&target_pts)?;
    let distractor = PlacedShape {
        class: rng.random_range(0..NUM_SHAPES),
        scale: rng.random_range(0.3..0.5),
        center: [
            rng.random_range(0.6..0.9) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            rng.random_range(-0.8..0.8),
            0.4,
        ],
    };
    let mut points = target_pts;
    let object = 0..points.len();
    points.extend(place(&distractor, n / 2, jitter, rng)?);
    for _ in 0..n / 2 {
        points.push(floor_point(rng));
    }
    for _ in 0..n / 4 {
        points.push(noise_point(rng));
    }
    Ok(BoxScene {
        points,
        object,
        object_box,
    })
}

/// Number of perturbations tried before a box crop is abandoned.
pub const BOX_CROP_TRIES: usize = 10;

/// Crops a perturbed box out of the scene and resamples to `n` points.
/// Returns `None` when every perturbation produced an empty crop.
pub fn box_ood_cloud<R: Rng + ?Sized>(
    scene: &BoxScene,
    n: usize,
    rng: &mut R,
) -> Option<Vec<Point>> {
    for _ in 0..BOX_CROP_TRIES {
        let bx = perturb_box(&scene.object_box, rng);
        let crop = crop_box(&scene.points, &bx);
        if crop.is_empty() {
            continue;
        }
        let mut pts = resample(&crop, n, rng);
        normalize_unit_sphere(&mut pts);
        return Some(pts);
    }
    None
}

/// Exactly `n` points: subsample without replacement when there are more,
/// pad with random duplicates when there are fewer.
pub fn resample<R: Rng + ?Sized>(points: &[Point], n: usize, rng: &mut R) -> Vec<Point> {
    use rand::seq::SliceRandom;
    if points.len() >= n {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
        idx.into_iter().map(|i| points[i]).collect()
    } else {
        let mut out = points.to_vec();
        while out.len() < n {
            out.push(points[rng.random_range(0..points.len())]);
        }
        out
    }
}
