//! Synthetic desk-scale shapes, simulated partial scans and occlusion holes.
//!
//! Every shape is reflection-symmetric about the xy-plane and sampled in
//! mirrored pairs: the output is `p0, mirror(p0), p1, mirror(p1), ...`, with a
//! point on the `z = 0` section appended when the count is odd.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{centroid, sq_dist, Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    PlaneSlab,
    Cylinder,
    BoxFrame,
    SphereShell,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::PlaneSlab,
        Category::Cylinder,
        Category::BoxFrame,
        Category::SphereShell,
    ];

    pub fn id(self) -> u32 {
        match self {
            Category::PlaneSlab => 0,
            Category::Cylinder => 1,
            Category::BoxFrame => 2,
            Category::SphereShell => 3,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::PlaneSlab => "plane-slab",
            Category::Cylinder => "cylinder",
            Category::BoxFrame => "box-frame",
            Category::SphereShell => "sphere-shell",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown category {s:?}")))
    }
}

/// Display name for a category id, falling back to the number.
pub fn category_name(id: u32) -> String {
    Category::from_id(id).map_or_else(|| id.to_string(), |c| c.name().to_string())
}

/// A concrete shape instance: category plus seed-drawn dimensions and yaw.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShape {
    pub category: Category,
    /// Half extents (meaning depends on category).
    dims: [f64; 3],
    yaw: f64,
}

impl SyntheticShape {
    pub fn new(category: Category, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a9e);
        let dims = match category {
            // x half-length, y half-thickness, z half-height
            Category::PlaneSlab => [rng.gen_range(0.3..0.38), rng.gen_range(0.03..0.05), rng.gen_range(0.15..0.3)],
            // axis half-length (along x), radius, unused
            Category::Cylinder => [rng.gen_range(0.3..0.42), rng.gen_range(0.12..0.2), 0.0],
            Category::BoxFrame => [rng.gen_range(0.2..0.3), rng.gen_range(0.15..0.25), rng.gen_range(0.1..0.2)],
            Category::SphereShell => [0.5, 0.0, 0.0],
        };
        let yaw = if category == Category::SphereShell {
            0.0
        } else {
            rng.gen_range(0.0..PI)
        };
        Self { category, dims, yaw }
    }

    /// Uniform surface samples, deterministic in `seed`.
    pub fn sample(&self, n_points: usize, seed: u64) -> Result<Vec<Point>> {
        if n_points < 16 {
            return Err(Error::contract(format!("synthetic shapes need >= 16 points, got {n_points}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n_points);
        for _ in 0..n_points / 2 {
            let p = self.surface_point(&mut rng);
            let upper = self.rotate([p[0], p[1], p[2].abs()]);
            out.push(upper);
            out.push([upper[0], upper[1], -upper[2]]);
        }
        if n_points % 2 == 1 {
            out.push(self.rotate(self.section_point(&mut rng)));
        }
        Ok(out)
    }

    fn rotate(&self, p: Point) -> Point {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
    }

    fn surface_point(&self, rng: &mut ChaCha8Rng) -> Point {
        let [a, b, c] = self.dims;
        match self.category {
            Category::SphereShell => {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let phi = rng.gen_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                [a * r * phi.cos(), a * r * phi.sin(), a * z]
            }
            Category::Cylinder => {
                let (h, r) = (a, b);
                let side = 2.0 * PI * r * 2.0 * h;
                let cap = PI * r * r;
                let u = rng.gen_range(0.0..side + 2.0 * cap);
                if u < side {
                    let t = rng.gen_range(0.0..2.0 * PI);
                    [rng.gen_range(-h..h), r * t.cos(), r * t.sin()]
                } else {
                    let rr = r * rng.gen::<f64>().sqrt();
                    let t = rng.gen_range(0.0..2.0 * PI);
                    let x = if u < side + cap { -h } else { h };
                    [x, rr * t.cos(), rr * t.sin()]
                }
            }
            Category::PlaneSlab => box_surface(rng, [a, b, c]),
            Category::BoxFrame => {
                // 12 edges: 4 along each axis, chosen by length
                let lengths = [a, b, c];
                let total: f64 = lengths.iter().map(|l| 4.0 * l).sum();
                let mut u = rng.gen_range(0.0..total);
                let mut axis = 0;
                while axis < 2 && u >= 4.0 * lengths[axis] {
                    u -= 4.0 * lengths[axis];
                    axis += 1;
                }
                let s1: f64 = if rng.gen() { 1.0 } else { -1.0 };
                let s2: f64 = if rng.gen() { 1.0 } else { -1.0 };
                let t = rng.gen_range(-1.0..1.0);
                match axis {
                    0 => [a * t, b * s1, c * s2],
                    1 => [a * s1, b * t, c * s2],
                    _ => [a * s1, b * s2, c * t],
                }
            }
        }
    }

    /// A surface point with `z = 0`.
    fn section_point(&self, rng: &mut ChaCha8Rng) -> Point {
        let [a, b, _] = self.dims;
        let sign: f64 = if rng.gen() { 1.0 } else { -1.0 };
        match self.category {
            Category::SphereShell => {
                let phi = rng.gen_range(0.0..2.0 * PI);
                [a * phi.cos(), a * phi.sin(), 0.0]
            }
            Category::Cylinder => [rng.gen_range(-a..a), sign * b, 0.0],
            Category::BoxFrame => {
                let s2: f64 = if rng.gen() { 1.0 } else { -1.0 };
                [sign * a, s2 * b, 0.0]
            }
            Category::PlaneSlab => {
                if rng.gen_range(0.0..a + b) < a {
                    [rng.gen_range(-a..a), sign * b, 0.0]
                } else {
                    [sign * a, rng.gen_range(-b..b), 0.0]
                }
            }
        }
    }
}

fn box_surface(rng: &mut ChaCha8Rng, h: [f64; 3]) -> Point {
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    let mut axis = 0;
    while axis < 2 && u >= areas[axis] {
        u -= areas[axis];
        axis += 1;
    }
    let sign = if rng.gen() { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    for k in 0..3 {
        p[k] = if k == axis { sign * h[k] } else { rng.gen_range(-h[k]..h[k]) };
    }
    p
}

/// Samples `n_points` on a seed-drawn instance of `category`.
pub fn gen_synthetic(category: Category, n_points: usize, seed: u64) -> Result<PointCloud> {
    let shape = SyntheticShape::new(category, seed);
    Ok(PointCloud::new(shape.sample(n_points, seed)?)?.with_category(Some(category.id())))
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Visibility {
    /// Rank by projection onto the view direction.
    #[default]
    HalfSpace,
    /// Splat into a view-aligned grid and rank by depth behind the front-most
    /// point of each cell.
    DepthBuffer { cell: f64 },
}

/// Keeps the `round(keep_fraction * N)` points most visible from `viewpoint`.
///
/// The output preserves input order. `seed` only breaks visibility ties.
pub fn make_partial(
    cloud: &PointCloud,
    viewpoint: [f64; 3],
    keep_fraction: f64,
    seed: u64,
    mode: Visibility,
) -> Result<PointCloud> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::contract(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    let norm = viewpoint.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::contract("viewpoint must be a non-zero finite vector"));
    }
    let view = viewpoint.map(|v| v / norm);
    let n = cloud.len();
    let keep = (keep_fraction * n as f64).round() as usize;
    if keep == 0 {
        return Err(Error::contract("keep_fraction keeps no points"));
    }
    let c = centroid(&cloud.points);
    let height: Vec<f64> = cloud
        .points
        .iter()
        .map(|p| (0..3).map(|k| (p[k] - c[k]) * view[k]).sum())
        .collect();
    // lower score = more visible
    let score: Vec<f64> = match mode {
        Visibility::HalfSpace => height.iter().map(|h| -h).collect(),
        Visibility::DepthBuffer { cell } => {
            if !(cell > 0.0) {
                return Err(Error::contract("depth-buffer cell size must be positive"));
            }
            let (u, v) = orthonormal_pair(view);
            let key = |p: &Point| {
                let pu: f64 = (0..3).map(|k| (p[k] - c[k]) * u[k]).sum();
                let pv: f64 = (0..3).map(|k| (p[k] - c[k]) * v[k]).sum();
                ((pu / cell).floor() as i64, (pv / cell).floor() as i64)
            };
            let mut front: HashMap<(i64, i64), f64> = HashMap::new();
            for (p, &h) in cloud.points.iter().zip(&height) {
                let e = front.entry(key(p)).or_insert(h);
                *e = e.max(h);
            }
            cloud
                .points
                .iter()
                .zip(&height)
                .map(|(p, &h)| front[&key(p)] - h)
                .collect()
        }
    };
    let mut tiebreak: Vec<usize> = (0..n).collect();
    tiebreak.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rank_of = vec![0; n];
    for (r, &i) in tiebreak.iter().enumerate() {
        rank_of[i] = r;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(rank_of[a].cmp(&rank_of[b])));
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    subset(cloud, &kept)
}

fn orthonormal_pair(v: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if v[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(v, helper));
    (u, cross(v, u))
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.map(|v| v / n)
}

/// Removes the `round(N * percent / 100)` points nearest a seed-chosen anchor,
/// leaving a contiguous hole. Output preserves input order.
pub fn occlude(cloud: &PointCloud, percent: f64, seed: u64) -> Result<PointCloud> {
    if !(percent > 0.0 && percent < 100.0) {
        return Err(Error::contract(format!("occlusion percent must be in (0, 100), got {percent}")));
    }
    let n = cloud.len();
    let remove = (n as f64 * percent / 100.0).round() as usize;
    if remove >= n {
        return Err(Error::contract(format!("occluding {percent}% of {n} points leaves nothing")));
    }
    let anchor = cloud.points[ChaCha8Rng::seed_from_u64(seed).gen_range(0..n)];
    let mut order: Vec<usize> = (0..n).collect();
    let d2: Vec<f64> = cloud.points.iter().map(|p| sq_dist(p, &anchor)).collect();
    order.sort_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[remove..].to_vec();
    kept.sort_unstable();
    subset(cloud, &kept)
}

fn subset(cloud: &PointCloud, idx: &[usize]) -> Result<PointCloud> {
    Ok(PointCloud::new(idx.iter().map(|&i| cloud.points[i]).collect())?
        .with_category(cloud.category)
        .with_id(cloud.id.clone()))
}

/// Evenly spread view directions are not needed; a uniform random unit vector is.
pub fn random_viewpoint(rng: &mut impl Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}
