//! Synthetic desk-scale shapes, sampled uniformly by surface area.
//!
//! All shapes are built in their own canonical frame with `+z` as the up
//! axis (the laptop's base lies in the `z = 0` plane).

use std::f64::consts::{PI, TAU};

use super::PointCloud;
use crate::error::{invalid, Result};
use crate::linalg::Vec3;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Sphere {
        radius: f64,
    },
    /// Full extents along x, y, z.
    Box {
        x: f64,
        y: f64,
        z: f64,
    },
    /// Closed cylinder (both caps) along z.
    Cylinder {
        radius: f64,
        height: f64,
    },
    /// Open-top cylinder with a bottom and a half-ring handle on the `+x` side.
    Mug {
        radius: f64,
        height: f64,
        handle_radius: f64,
    },
    /// Two `width x depth` panels joined along the x axis; `angle` is the
    /// opening angle in radians.
    Laptop {
        width: f64,
        depth: f64,
        angle: f64,
    },
}

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sphere { .. } => "sphere",
            Self::Box { .. } => "box",
            Self::Cylinder { .. } => "cylinder",
            Self::Mug { .. } => "mug",
            Self::Laptop { .. } => "laptop",
        }
    }

    /// Default proportions for a named kind.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sphere" => Self::Sphere { radius: 1.0 },
            "box" => Self::Box { x: 2.0, y: 1.0, z: 0.5 },
            "cylinder" => Self::Cylinder {
                radius: 0.5,
                height: 2.0,
            },
            "mug" => Self::Mug {
                radius: 0.5,
                height: 1.2,
                handle_radius: 0.3,
            },
            "laptop" => Self::Laptop {
                width: 1.4,
                depth: 1.0,
                angle: 1.9,
            },
            _ => return None,
        })
    }

    fn dimensions(&self) -> Vec<f64> {
        match *self {
            Self::Sphere { radius } => vec![radius],
            Self::Box { x, y, z } => vec![x, y, z],
            Self::Cylinder { radius, height } => vec![radius, height],
            Self::Mug {
                radius,
                height,
                handle_radius,
            } => vec![radius, height, handle_radius],
            Self::Laptop { width, depth, angle } => vec![width, depth, angle],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, seed: u64) -> Result<Self> {
        if kind.dimensions().iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(invalid(format!("{} dimensions must be positive", kind.name())));
        }
        match kind {
            ShapeKind::Mug {
                height, handle_radius, ..
            } if handle_radius >= height / 2.0 => {
                return Err(invalid("mug handle must fit within half the height"));
            }
            ShapeKind::Laptop { angle, .. } if angle >= PI => {
                return Err(invalid("laptop opening angle must be below pi"));
            }
            _ => {}
        }
        Ok(Self { kind, seed })
    }
}

/// Sample `n >= 8` points uniformly on the surface of `spec`.
pub fn generate_shape(spec: &ShapeSpec, n: usize) -> Result<PointCloud> {
    if n < 8 {
        return Err(invalid(format!("need at least 8 points, asked for {n}")));
    }
    let spec = ShapeSpec::new(spec.kind, spec.seed)?;
    let mut rng = Rng::new(spec.seed);
    let points = (0..n).map(|_| sample(&spec.kind, &mut rng)).collect();
    PointCloud::new(points)
}

/// Pick index `i` with probability `weights[i] / sum(weights)`.
fn pick(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn disk(radius: f64, z: f64, rng: &mut Rng) -> Vec3 {
    let r = radius * rng.uniform().sqrt();
    let phi = rng.range(0.0, TAU);
    [r * phi.cos(), r * phi.sin(), z]
}

fn tube(radius: f64, height: f64, rng: &mut Rng) -> Vec3 {
    let phi = rng.range(0.0, TAU);
    [
        radius * phi.cos(),
        radius * phi.sin(),
        rng.range(-height / 2.0, height / 2.0),
    ]
}

fn sample(kind: &ShapeKind, rng: &mut Rng) -> Vec3 {
    match *kind {
        ShapeKind::Sphere { radius } => loop {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-9 {
                break [radius * v[0] / n, radius * v[1] / n, radius * v[2] / n];
            }
        },
        ShapeKind::Box { x, y, z } => {
            let h = [x / 2.0, y / 2.0, z / 2.0];
            // faces normal to axis k come in pairs with area of the other two extents
            let areas = [y * z, y * z, x * z, x * z, x * y, x * y];
            let face = pick(&areas, rng);
            let axis = face / 2;
            let sign = if face.is_multiple_of(2) { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (k, c) in p.iter_mut().enumerate() {
                *c = if k == axis { sign * h[k] } else { rng.range(-h[k], h[k]) };
            }
            p
        }
        ShapeKind::Cylinder { radius, height } => {
            let cap = PI * radius * radius;
            match pick(&[TAU * radius * height, cap, cap], rng) {
                0 => tube(radius, height, rng),
                1 => disk(radius, height / 2.0, rng),
                _ => disk(radius, -height / 2.0, rng),
            }
        }
        ShapeKind::Mug {
            radius,
            height,
            handle_radius,
        } => {
            let tube_r = 0.15 * handle_radius;
            // half torus: area = 2 pi^2 R r
            let handle_area = 2.0 * PI * PI * handle_radius * tube_r;
            match pick(&[TAU * radius * height, PI * radius * radius, handle_area], rng) {
                0 => tube(radius, height, rng),
                1 => disk(radius, -height / 2.0, rng),
                _ => {
                    // rejection on the tube angle gives the (R + r cos) area density
                    let theta = loop {
                        let t = rng.range(0.0, TAU);
                        let accept = (handle_radius + tube_r * t.cos()) / (handle_radius + tube_r);
                        if rng.uniform() < accept {
                            break t;
                        }
                    };
                    let phi = rng.range(-PI / 2.0, PI / 2.0);
                    let ring = handle_radius + tube_r * theta.cos();
                    [radius + ring * phi.cos(), tube_r * theta.sin(), ring * phi.sin()]
                }
            }
        }
        ShapeKind::Laptop { width, depth, angle } => {
            let x = rng.range(-width / 2.0, width / 2.0);
            let u = rng.range(0.0, depth);
            if rng.uniform() < 0.5 {
                [x, u, 0.0]
            } else {
                [x, u * angle.cos(), u * angle.sin()]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ShapeKind) -> ShapeSpec {
        ShapeSpec::new(kind, 0).unwrap()
    }

    #[test]
    fn sphere_points_on_surface() {
        let pc = generate_shape(&spec(ShapeKind::Sphere { radius: 1.0 }), 1000).unwrap();
        assert_eq!(pc.len(), 1000);
        for p in pc.points() {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn deterministic() {
        for name in ["sphere", "box", "cylinder", "mug", "laptop"] {
            let s = ShapeSpec::new(ShapeKind::from_name(name).unwrap(), 42).unwrap();
            assert_eq!(generate_shape(&s, 200).unwrap(), generate_shape(&s, 200).unwrap());
        }
    }

    #[test]
    fn box_points_on_faces() {
        let pc = generate_shape(&spec(ShapeKind::Box { x: 2.0, y: 1.0, z: 0.5 }), 500).unwrap();
        let h = [1.0, 0.5, 0.25];
        let mut face_hits = [0usize; 6];
        for p in pc.points() {
            // inside the box and on at least one face
            assert!((0..3).all(|k| p[k].abs() <= h[k] + 1e-9));
            let on: Vec<usize> = (0..6)
                .filter(|&f| (p[f / 2] - if f % 2 == 0 { h[f / 2] } else { -h[f / 2] }).abs() <= 1e-9)
                .collect();
            assert!(!on.is_empty(), "{p:?} not on a face");
            face_hits[on[0]] += 1;
        }
        // the two largest faces (normal to z, area 2) carry the most points
        assert!(face_hits[4] > face_hits[0] && face_hits[5] > face_hits[1]);
    }

    #[test]
    fn cylinder_and_mug_geometry() {
        let pc = generate_shape(
            &spec(ShapeKind::Cylinder {
                radius: 0.5,
                height: 2.0,
            }),
            400,
        )
        .unwrap();
        for p in pc.points() {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let on_side = (r - 0.5).abs() < 1e-9 && p[2].abs() <= 1.0 + 1e-12;
            let on_cap = r <= 0.5 + 1e-12 && (p[2].abs() - 1.0).abs() < 1e-12;
            assert!(on_side || on_cap);
        }
        let mug = generate_shape(&ShapeSpec::new(ShapeKind::from_name("mug").unwrap(), 1).unwrap(), 2000).unwrap();
        // open top: nothing sits on the top rim plane inside the radius
        assert!(mug
            .points()
            .iter()
            .all(|p| !(p[2] > 0.6 - 1e-12 && (p[0] * p[0] + p[1] * p[1]).sqrt() < 0.49)));
        // some handle points outside the body
        assert!(mug.points().iter().any(|p| p[0] > 0.6));
    }

    #[test]
    fn laptop_on_two_planes() {
        let a: f64 = 1.9;
        let pc = generate_shape(
            &spec(ShapeKind::Laptop {
                width: 1.4,
                depth: 1.0,
                angle: a,
            }),
            300,
        )
        .unwrap();
        let screen_normal = [0.0, -a.sin(), a.cos()];
        for p in pc.points() {
            let on_base = p[2].abs() < 1e-12;
            let on_screen = (p[1] * screen_normal[1] + p[2] * screen_normal[2]).abs() < 1e-9;
            assert!(on_base || on_screen);
        }
    }

    #[test]
    fn centroid_inside_bounding_box() {
        for name in ["sphere", "box", "cylinder", "mug", "laptop"] {
            let pc = generate_shape(&ShapeSpec::new(ShapeKind::from_name(name).unwrap(), 9).unwrap(), 300).unwrap();
            let c = pc.centroid();
            for k in 0..3 {
                let lo = pc.points().iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
                let hi = pc.points().iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
                assert!(c[k] >= lo && c[k] <= hi);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(ShapeSpec::new(ShapeKind::Sphere { radius: 0.0 }, 0).is_err());
        assert!(ShapeSpec::new(
            ShapeKind::Box {
                x: 1.0,
                y: -1.0,
                z: 1.0
            },
            0
        )
        .is_err());
        assert!(ShapeSpec::new(
            ShapeKind::Mug {
                radius: 1.0,
                height: 1.0,
                handle_radius: 0.6
            },
            0
        )
        .is_err());
        assert!(ShapeSpec::new(
            ShapeKind::Laptop {
                width: 1.0,
                depth: 1.0,
                angle: 4.0
            },
            0
        )
        .is_err());
        let ok = spec(ShapeKind::Sphere { radius: 1.0 });
        assert!(generate_shape(&ok, 7).is_err());
    }
}
