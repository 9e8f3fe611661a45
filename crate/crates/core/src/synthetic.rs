//! Synthetic (partial, complete) shape pairs for tests and demos.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::save_cloud;
use crate::points::PointCloud;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    /// Sphere of radius 0.4.
    Sphere,
    /// 0.8 × 0.8 square in the z = 0 plane.
    Plane,
    /// Torus with radii 0.3 and 0.1.
    Torus,
    /// Surface of a cube with side 0.6.
    Cube,
}

pub const SHAPES: [Shape; 4] = [Shape::Sphere, Shape::Plane, Shape::Torus, Shape::Cube];

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Sphere => "sphere",
            Shape::Plane => "plane",
            Shape::Torus => "torus",
            Shape::Cube => "cube",
        })
    }
}

impl FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SHAPES
            .into_iter()
            .find(|sh| sh.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape '{s}'")))
    }
}

impl Shape {
    /// One point drawn uniformly from the surface.
    pub fn sample_point(self, rng: &mut Rng) -> [f64; 3] {
        match self {
            Shape::Sphere => {
                let v = loop {
                    let v = [rng.normal(), rng.normal(), rng.normal()];
                    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if r > 1e-9 {
                        break v.map(|c| 0.4 * c / r);
                    }
                };
                v
            }
            Shape::Plane => [rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 0.0],
            Shape::Torus => {
                let (big, small) = (0.3, 0.1);
                // rejection on the tube angle keeps the area density uniform
                loop {
                    let u = rng.uniform(0.0, std::f64::consts::TAU);
                    let v = rng.uniform(0.0, std::f64::consts::TAU);
                    if rng.uniform(0.0, big + small) <= big + small * v.cos() {
                        let r = big + small * v.cos();
                        return [r * u.cos(), r * u.sin(), small * v.sin()];
                    }
                }
            }
            Shape::Cube => {
                let face = rng.below(6);
                let (a, b) = (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
                let s = if face % 2 == 0 { 0.3 } else { -0.3 };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
        }
    }

    pub fn sample(self, n: usize, rng: &mut Rng) -> Result<PointCloud> {
        let rows: Vec<[f64; 3]> = (0..n).map(|_| self.sample_point(rng)).collect();
        PointCloud::from_points(&rows)
    }

    /// `n` surface points on the side `x ≤ cut` (x ≥ cut when `keep_low`
    /// is false); the half-cut partial scan of the shape.
    pub fn sample_half(self, n: usize, cut: f64, keep_low: bool, rng: &mut Rng) -> Result<PointCloud> {
        let mut rows = Vec::with_capacity(n);
        let mut tries = 0usize;
        while rows.len() < n {
            tries += 1;
            if tries > 1000 * n.max(1) {
                return Err(Error::Input(format!("{self}: cut at {cut} leaves no surface")));
            }
            let p = self.sample_point(rng);
            if (p[0] <= cut) == keep_low {
                rows.push(p);
            }
        }
        PointCloud::from_points(&rows)
    }
}

#[derive(Clone, Debug)]
pub struct ShapePair {
    pub id: String,
    pub category: String,
    pub partial: PointCloud,
    pub complete: PointCloud,
}

/// Partial scan (half cut through the center) and complete surface of one
/// shape.
pub fn make_pair(shape: Shape, index: usize, partial_points: usize, complete_points: usize, seed: u64) -> Result<ShapePair> {
    let mut rng = Rng::new(seed);
    let complete = shape.sample(complete_points, &mut rng)?;
    let partial = shape.sample_half(partial_points, 0.0, index % 2 == 0, &mut rng)?;
    Ok(ShapePair {
        id: format!("{index:04}"),
        category: shape.to_string(),
        partial,
        complete,
    })
}

/// Small set with `per_shape` pairs of every shape.
pub fn fixture_set(per_shape: usize, partial_points: usize, complete_points: usize, seed: u64) -> Result<Vec<ShapePair>> {
    let mut out = Vec::new();
    for (si, shape) in SHAPES.into_iter().enumerate() {
        for i in 0..per_shape {
            let s = seed.wrapping_add((si * 1000 + i) as u64);
            out.push(make_pair(shape, i, partial_points, complete_points, s)?);
        }
    }
    Ok(out)
}

/// Writes `root/partial/<category>/<id>.xyz` and the matching
/// `root/complete/...` files.
pub fn write_fixtures(root: &Path, pairs: &[ShapePair]) -> Result<()> {
    for p in pairs {
        save_cloud(&root.join("partial").join(&p.category).join(format!("{}.xyz", p.id)), &p.partial)?;
        save_cloud(&root.join("complete").join(&p.category).join(format!("{}.xyz", p.id)), &p.complete)?;
    }
    Ok(())
}

/// Same cloud with every coordinate rounded through f32, which is what the
/// text and binary writers store.
pub fn quantize(cloud: &PointCloud) -> PointCloud {
    let t = cloud.tensor();
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    PointCloud::new(Tensor::new(t.shape().to_vec(), data).expect("same shape")).expect("finite")
}
