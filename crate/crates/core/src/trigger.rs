//! Seed points on the zero level set.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::net::NetworkSpec;
use crate::{Aabb, FieldKind, Vec3};

pub const SEED_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerScheme {
    Sgd,
    SphereTrace,
    #[default]
    Dichotomy,
}

impl FromStr for TriggerScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "st" | "sphere_trace" => Ok(Self::SphereTrace),
            "dich" | "dichotomy" => Ok(Self::Dichotomy),
            _ => Err(format!("unknown trigger scheme `{s}` (expected sgd, st or dich)")),
        }
    }
}

impl fmt::Display for TriggerScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::SphereTrace => "sphere_trace",
            Self::Dichotomy => "dichotomy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TriggerError {
    #[error("not converged after {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("iterate left the search region")]
    Diverged,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no surface located in bbox")]
    NoSurface,
    #[error("trigger scheme {scheme} is not supported for {kind:?} networks")]
    Unsupported { scheme: TriggerScheme, kind: FieldKind },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seed {
    pub point: Vec3,
    pub iterations: usize,
}

/// Gradient descent on |F| with the step halved after every sign change.
pub fn seed_sgd(net: &NetworkSpec, x0: &Vec3, max_iters: usize, step: f64) -> Result<Seed, TriggerError> {
    let mut x = *x0;
    let mut lr = step;
    let mut f = net.forward(&x);
    for it in 0..=max_iters {
        if f.abs() <= SEED_TOL {
            return Ok(Seed { point: x, iterations: it });
        }
        if it == max_iters || !f.is_finite() {
            break;
        }
        let g = net.grad_input(&x);
        let next = x - g * (lr * f.signum());
        let fn_ = net.forward(&next);
        if fn_.signum() != f.signum() {
            lr *= 0.5;
        }
        x = next;
        f = fn_;
    }
    Err(TriggerError::NotConverged { iterations: max_iters })
}

/// `x <- x - eta F(x) grad F(x)`; fails when the iterate leaves ten times `bbox`.
pub fn seed_sphere_trace(
    net: &NetworkSpec,
    x0: &Vec3,
    eta: f64,
    max_iters: usize,
    bbox: &Aabb,
) -> Result<Seed, TriggerError> {
    if net.field_kind != FieldKind::Sdf {
        return Err(TriggerError::Unsupported {
            scheme: TriggerScheme::SphereTrace,
            kind: net.field_kind,
        });
    }
    let c = bbox.center();
    let half = bbox.extent() * 5.0;
    let mut x = *x0;
    for it in 0..=max_iters {
        let f = net.forward(&x);
        if f.abs() <= SEED_TOL {
            return Ok(Seed { point: x, iterations: it });
        }
        if it == max_iters || !f.is_finite() {
            break;
        }
        x -= net.grad_input(&x) * (eta * f);
        if (0..3).any(|i| (x[i] - c[i]).abs() > half[i]) {
            return Err(TriggerError::Diverged);
        }
    }
    Err(TriggerError::NotConverged { iterations: max_iters })
}

/// Bisection between a positive and a negative point until `F(x+) - F(x-) <= eps`.
pub fn seed_dichotomy(
    net: &NetworkSpec,
    x_pos: &Vec3,
    x_neg: &Vec3,
    eps: f64,
    max_iters: usize,
) -> Result<Seed, TriggerError> {
    let (mut p, mut n) = (*x_pos, *x_neg);
    let (mut fp, mut fn_) = (net.forward(&p), net.forward(&n));
    if !(fp > 0.0 && fn_ < 0.0) {
        return Err(TriggerError::Precondition(format!(
            "need F(x_pos) > 0 > F(x_neg), got {fp} and {fn_}"
        )));
    }
    for it in 0..=max_iters {
        let mid = (p + n) * 0.5;
        if fp - fn_ <= eps {
            return Ok(Seed { point: mid, iterations: it });
        }
        if it == max_iters {
            break;
        }
        let fm = net.forward(&mid);
        if fm > 0.0 {
            p = mid;
            fp = fm;
        } else if fm < 0.0 {
            n = mid;
            fn_ = fm;
        } else {
            return Ok(Seed {
                point: mid,
                iterations: it + 1,
            });
        }
    }
    Err(TriggerError::NotConverged { iterations: max_iters })
}

/// Rejects schemes that need a distance-like field on occupancy networks.
pub fn validate_scheme(net: &NetworkSpec, scheme: TriggerScheme) -> Result<(), TriggerError> {
    if net.field_kind == FieldKind::Occupancy && scheme != TriggerScheme::Dichotomy {
        return Err(TriggerError::Unsupported {
            scheme,
            kind: net.field_kind,
        });
    }
    Ok(())
}

/// Random-number stream for seed `index`.
pub fn seed_rng(rng_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(index);
    rng
}

fn uniform_in(bbox: &Aabb, rng: &mut impl Rng) -> Vec3 {
    bbox.lerp(&Vec3::new(rng.random(), rng.random(), rng.random()))
}

const DICHOTOMY_EPS: f64 = 1e-9;
const DICHOTOMY_ITERS: usize = 96;
const DRAW_BUDGET: usize = 2000;
const RESTARTS: usize = 8;

/// One seed for stream `index`, `None` if the retry budget runs out.
pub fn find_seed(net: &NetworkSpec, bbox: &Aabb, scheme: TriggerScheme, rng_seed: u64, index: u64) -> Option<Seed> {
    let mut rng = seed_rng(rng_seed, index);
    let tol = SEED_TOL.max(DICHOTOMY_EPS);
    let accept = |s: Seed| (net.forward(&s.point).abs() <= tol).then_some(s);
    match scheme {
        TriggerScheme::Dichotomy => {
            let a = uniform_in(bbox, &mut rng);
            let fa = net.forward(&a);
            if fa == 0.0 {
                return Some(Seed { point: a, iterations: 0 });
            }
            for _ in 0..DRAW_BUDGET {
                let b = uniform_in(bbox, &mut rng);
                let fb = net.forward(&b);
                if fb == 0.0 {
                    return Some(Seed { point: b, iterations: 0 });
                }
                if fa.signum() != fb.signum() {
                    let (p, n) = if fa > 0.0 { (a, b) } else { (b, a) };
                    return seed_dichotomy(net, &p, &n, DICHOTOMY_EPS, DICHOTOMY_ITERS).ok().and_then(accept);
                }
            }
            None
        }
        TriggerScheme::Sgd => (0..RESTARTS).find_map(|_| {
            let x0 = uniform_in(bbox, &mut rng);
            seed_sgd(net, &x0, 1000, 0.05).ok().and_then(accept)
        }),
        TriggerScheme::SphereTrace => (0..RESTARTS).find_map(|_| {
            let x0 = uniform_in(bbox, &mut rng);
            seed_sphere_trace(net, &x0, 1.0, 100, bbox).ok().and_then(accept)
        }),
    }
}

/// Up to `count` surface points, deterministic in `rng_seed`.
pub fn sample_seeds(
    net: &NetworkSpec,
    count: usize,
    bbox: &Aabb,
    scheme: TriggerScheme,
    rng_seed: u64,
) -> Result<Vec<Vec3>, TriggerError> {
    validate_scheme(net, scheme)?;
    if count == 0 {
        return Err(TriggerError::Precondition("seed count must be at least 1".into()));
    }
    let seeds: Vec<Vec3> = (0..count as u64)
        .into_par_iter()
        .map(|i| find_seed(net, bbox, scheme, rng_seed, i).map(|s| s.point))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    if seeds.is_empty() {
        return Err(TriggerError::NoSurface);
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::octahedron;

    #[test]
    fn sgd_from_axis_point() {
        let net = octahedron(0.5);
        let s = seed_sgd(&net, &Vec3::new(0.9, 0.0, 0.0), 100, 0.1).unwrap();
        assert!(net.forward(&s.point).abs() <= SEED_TOL);
    }

    #[test]
    fn surface_point_is_fixed() {
        let net = octahedron(0.5);
        let x = Vec3::new(0.5, 0.0, 0.0);
        assert_eq!(seed_sgd(&net, &x, 10, 0.1).unwrap(), Seed { point: x, iterations: 0 });
        assert_eq!(seed_sphere_trace(&net, &x, 1.0, 10, &Aabb::default()).unwrap().point, x);
    }

    #[test]
    fn zero_step_does_not_converge() {
        let net = octahedron(0.5);
        let r = seed_sphere_trace(&net, &Vec3::new(0.9, 0.1, 0.0), 0.0, 20, &Aabb::default());
        assert_eq!(r, Err(TriggerError::NotConverged { iterations: 20 }));
    }

    #[test]
    fn bisection_on_axis() {
        let net = octahedron(0.5);
        let eps = 1e-6;
        let s = seed_dichotomy(&net, &Vec3::new(1.0, 0.0, 0.0), &Vec3::zeros(), eps, 64).unwrap();
        assert!((s.point - Vec3::new(0.5, 0.0, 0.0)).norm() <= eps);
        assert!(s.iterations <= (1.0 / eps).log2().ceil() as usize);
        // F has unit slope along x, so the value gap equals the bracket length 0.9 / 2^t.
        let s = seed_dichotomy(&net, &Vec3::new(1.0, 0.0, 0.0), &Vec3::new(0.1, 0.0, 0.0), eps, 64).unwrap();
        assert_eq!(s.iterations, 20);
        assert!((s.point - Vec3::new(0.5, 0.0, 0.0)).norm() <= eps);
    }

    #[test]
    fn bisection_rejects_same_sign() {
        let net = octahedron(0.5);
        let r = seed_dichotomy(&net, &Vec3::new(1.0, 0.0, 0.0), &Vec3::new(0.0, 1.0, 0.0), 1e-6, 64);
        assert!(matches!(r, Err(TriggerError::Precondition(_))));
    }

    #[test]
    fn occupancy_guard() {
        let occ = octahedron(0.5).to_occupancy(10.0).unwrap();
        assert!(validate_scheme(&occ, TriggerScheme::Sgd).is_err());
        assert!(validate_scheme(&occ, TriggerScheme::SphereTrace).is_err());
        assert!(validate_scheme(&occ, TriggerScheme::Dichotomy).is_ok());
    }
}
