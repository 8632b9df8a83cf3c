//! Analytic ground-truth shapes with exact distance functions and
//! area-uniform surface samplers.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::mesh::TriangleMesh;
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticShape {
    Sphere { r: f64 },
    Box { half: Vec3 },
    /// Torus around the z axis.
    Torus { major: f64, minor: f64 },
    /// `{ x : |x|_1 <= c }`.
    L1Ball { c: f64 },
}

impl AnalyticShape {
    /// Exact Euclidean signed distance, negative inside.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match *self {
            AnalyticShape::Sphere { r } => p.norm() - r,
            AnalyticShape::Box { half } => {
                let q = p.abs() - half;
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
            AnalyticShape::Torus { major, minor } => {
                let qx = (p.x * p.x + p.y * p.y).sqrt() - major;
                (qx * qx + p.z * p.z).sqrt() - minor
            }
            AnalyticShape::L1Ball { c } => octahedron_sdf(p, c),
        }
    }

    /// Field used as the regression target when fitting networks.
    ///
    /// Equal to [`sdf`](Self::sdf) except for the l1 ball, whose target is the
    /// piecewise-linear level function `|x|_1 - c` that a ReLU net represents exactly.
    pub fn regression_target(&self, p: &Vec3) -> f64 {
        match *self {
            AnalyticShape::L1Ball { c } => p.abs().sum() - c,
            _ => self.sdf(p),
        }
    }

    /// Outward unit normal at a surface point.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        match *self {
            AnalyticShape::Sphere { .. } => p.normalize(),
            AnalyticShape::Torus { major, .. } => {
                let rho = (p.x * p.x + p.y * p.y).sqrt().max(f64::MIN_POSITIVE);
                let c = Vec3::new(p.x / rho * major, p.y / rho * major, 0.0);
                (p - c).normalize()
            }
            AnalyticShape::Box { half } => {
                let q = p.abs() - half;
                let axis = q.imax();
                let mut n = Vec3::zeros();
                n[axis] = p[axis].signum();
                n
            }
            AnalyticShape::L1Ball { .. } => p.map(|v| if v >= 0.0 { 1.0 } else { -1.0 }) / 3f64.sqrt(),
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            AnalyticShape::Sphere { r } => 2.0 * TAU * r * r,
            AnalyticShape::Box { half } => 8.0 * (half.x * half.y + half.y * half.z + half.z * half.x),
            AnalyticShape::Torus { major, minor } => TAU * TAU * major * minor,
            AnalyticShape::L1Ball { c } => 8.0 * 3f64.sqrt() / 2.0 * c * c,
        }
    }

    /// Point uniformly distributed over the surface area.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        match *self {
            AnalyticShape::Sphere { r } => loop {
                let v = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
                let n = v.norm();
                if n > 1e-12 {
                    break v * (r / n);
                }
            },
            AnalyticShape::Box { half } => {
                let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
                let total: f64 = areas.iter().sum();
                let mut t = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if t < *a {
                        axis = i;
                        break;
                    }
                    t -= a;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = Vec3::zeros();
                for i in 0..3 {
                    p[i] = if i == axis {
                        sign * half[i]
                    } else {
                        (2.0 * rng.random::<f64>() - 1.0) * half[i]
                    };
                }
                p
            }
            AnalyticShape::Torus { major, minor } => {
                let u = rng.random::<f64>() * TAU;
                // Area element is proportional to major + minor cos v.
                let v = loop {
                    let v = rng.random::<f64>() * TAU;
                    if rng.random::<f64>() * (major + minor) <= major + minor * v.cos() {
                        break v;
                    }
                };
                let rho = major + minor * v.cos();
                Vec3::new(rho * u.cos(), rho * u.sin(), minor * v.sin())
            }
            AnalyticShape::L1Ball { c } => {
                let (mut a, mut b) = (rng.random::<f64>(), rng.random::<f64>());
                if a + b > 1.0 {
                    a = 1.0 - a;
                    b = 1.0 - b;
                }
                let mut p = Vec3::new(a * c, b * c, (1.0 - a - b) * c);
                for i in 0..3 {
                    if rng.random::<bool>() {
                        p[i] = -p[i];
                    }
                }
                p
            }
        }
    }

    /// Exact triangulation when the surface is polyhedral.
    pub fn exact_mesh(&self) -> Option<TriangleMesh> {
        match *self {
            AnalyticShape::L1Ball { c } => {
                let vertices = vec![
                    Vec3::new(c, 0.0, 0.0),
                    Vec3::new(-c, 0.0, 0.0),
                    Vec3::new(0.0, c, 0.0),
                    Vec3::new(0.0, -c, 0.0),
                    Vec3::new(0.0, 0.0, c),
                    Vec3::new(0.0, 0.0, -c),
                ];
                let triangles = vec![
                    [0, 2, 4],
                    [2, 1, 4],
                    [1, 3, 4],
                    [3, 0, 4],
                    [2, 0, 5],
                    [1, 2, 5],
                    [3, 1, 5],
                    [0, 3, 5],
                ];
                Some(TriangleMesh { vertices, triangles })
            }
            AnalyticShape::Box { half } => {
                let mut vertices = Vec::with_capacity(8);
                for k in 0..8 {
                    vertices.push(Vec3::new(
                        if k & 1 == 0 { -half.x } else { half.x },
                        if k & 2 == 0 { -half.y } else { half.y },
                        if k & 4 == 0 { -half.z } else { half.z },
                    ));
                }
                let quads = [
                    [0, 2, 3, 1],
                    [4, 5, 7, 6],
                    [0, 1, 5, 4],
                    [2, 6, 7, 3],
                    [0, 4, 6, 2],
                    [1, 3, 7, 5],
                ];
                let triangles = quads
                    .iter()
                    .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
                    .collect();
                Some(TriangleMesh { vertices, triangles })
            }
            _ => None,
        }
    }
}

/// Exact Euclidean distance to the octahedron `|x|_1 = c`.
fn octahedron_sdf(p: &Vec3, c: f64) -> f64 {
    let p = p.abs();
    let m = p.x + p.y + p.z - c;
    let q = if 3.0 * p.x < m {
        p
    } else if 3.0 * p.y < m {
        Vec3::new(p.y, p.z, p.x)
    } else if 3.0 * p.z < m {
        Vec3::new(p.z, p.x, p.y)
    } else {
        return m / 3f64.sqrt();
    };
    let k = (0.5 * (q.z - q.y + c)).clamp(0.0, c);
    Vec3::new(q.x, q.y - c + k, q.z - k).norm()
}

impl fmt::Display for AnalyticShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalyticShape::Sphere { r } => write!(f, "sphere:{r}"),
            AnalyticShape::Box { half } => write!(f, "box:{},{},{}", half.x, half.y, half.z),
            AnalyticShape::Torus { major, minor } => write!(f, "torus:{major},{minor}"),
            AnalyticShape::L1Ball { c } => write!(f, "l1ball:{c}"),
        }
    }
}

impl FromStr for AnalyticShape {
    type Err = String;

    /// `sphere:R`, `box:A` or `box:A,B,C`, `torus:R,r`, `l1ball:C`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, args) = s.split_once(':').ok_or_else(|| format!("shape `{s}` needs parameters, e.g. sphere:0.5"))?;
        let vals: Vec<f64> = args
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad shape parameter `{t}`: {e}")))
            .collect::<Result<_, _>>()?;
        if vals.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(format!("shape parameters must be positive: `{s}`"));
        }
        match (kind, vals.as_slice()) {
            ("sphere", [r]) => Ok(AnalyticShape::Sphere { r: *r }),
            ("box", [a]) => Ok(AnalyticShape::Box { half: Vec3::repeat(*a) }),
            ("box", [a, b, c]) => Ok(AnalyticShape::Box {
                half: Vec3::new(*a, *b, *c),
            }),
            ("torus", [r1, r2]) if r2 < r1 => Ok(AnalyticShape::Torus { major: *r1, minor: *r2 }),
            ("l1ball", [c]) => Ok(AnalyticShape::L1Ball { c: *c }),
            _ => Err(format!("unrecognized shape `{s}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shapes() -> [AnalyticShape; 4] {
        [
            AnalyticShape::Sphere { r: 0.5 },
            AnalyticShape::Box {
                half: Vec3::new(0.4, 0.3, 0.5),
            },
            AnalyticShape::Torus { major: 0.5, minor: 0.2 },
            AnalyticShape::L1Ball { c: 0.6 },
        ]
    }

    #[test]
    fn samples_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in shapes() {
            for _ in 0..2000 {
                let p = s.sample_point(&mut rng);
                assert!(s.sdf(&p).abs() <= 1e-12, "{s}: {}", s.sdf(&p));
            }
        }
    }

    #[test]
    fn parse_round_trip() {
        for s in shapes() {
            assert_eq!(s.to_string().parse::<AnalyticShape>().unwrap(), s);
        }
        assert!("cone:1".parse::<AnalyticShape>().is_err());
        assert!("sphere:-1".parse::<AnalyticShape>().is_err());
        assert!("torus:0.2,0.5".parse::<AnalyticShape>().is_err());
    }

    #[test]
    fn octahedron_distance_known_points() {
        let s = AnalyticShape::L1Ball { c: 1.0 };
        // Face interior: distance along the face normal.
        assert!((s.sdf(&Vec3::repeat(1.0)) - 2.0 / 3f64.sqrt()).abs() < 1e-15);
        // Beyond a vertex.
        assert!((s.sdf(&Vec3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-15);
        assert!((s.sdf(&Vec3::zeros()) + 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }
}
