#![allow(dead_code)]

use exactmesh::net::{random_mlp, Dense, FieldKind, Head, LayerSpec, NetworkSpec, Subnetwork};
use exactmesh::Vec3;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let v: f64 = StandardNormal.sample(rng);
    v * scale
}

fn dense(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Dense {
    let s = (2.0 / inp as f64).sqrt();
    Dense::new(
        DMatrix::from_fn(out, inp, |_, _| gauss(rng, s)),
        DVector::from_fn(out, |_, _| gauss(rng, 0.3)),
    )
}

/// Subnetwork mixing dense and residual layers.
fn mixed_subnet(rng: &mut ChaCha8Rng, depth: usize, max_width: usize) -> Subnetwork {
    let mut layers = Vec::new();
    let mut dim = 3;
    for _ in 0..depth {
        let width = rng.random_range(2..=max_width);
        let layer = match rng.random_range(0..3) {
            0 => LayerSpec::Dense(dense(rng, width, dim)),
            1 => {
                let mid = rng.random_range(2..=max_width);
                LayerSpec::ResidualIdentity {
                    inner: vec![dense(rng, mid, dim), dense(rng, dim, mid)],
                }
            }
            _ => LayerSpec::ResidualLinear {
                inner: vec![dense(rng, width, dim)],
                shortcut: dense(rng, width, dim),
            },
        };
        dim = layer.out_dim();
        layers.push(layer);
    }
    let head = Head {
        weight: DVector::from_fn(dim, |_, _| gauss(rng, (1.0 / dim as f64).sqrt())),
        bias: gauss(rng, 0.1),
    };
    Subnetwork { layers, head }
}

/// Random network of any supported architecture, chosen by `seed`.
pub fn random_net(seed: u64) -> NetworkSpec {
    let mut rng = rng(seed);
    let depth = rng.random_range(1..=4);
    match seed % 3 {
        0 => {
            let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=12)).collect();
            random_mlp(&widths, &mut rng)
        }
        1 => NetworkSpec {
            field_kind: FieldKind::Sdf,
            subnetworks: vec![mixed_subnet(&mut rng, depth, 10)],
        },
        _ => {
            let m = rng.random_range(2..=3);
            NetworkSpec {
                field_kind: FieldKind::Sdf,
                subnetworks: (0..m).map(|_| mixed_subnet(&mut rng, depth.min(3), 8)).collect(),
            }
        }
    }
}

pub fn point_in(rng: &mut ChaCha8Rng, h: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-h..h),
        rng.random_range(-h..h),
        rng.random_range(-h..h),
    )
}

/// Norm-wise relative error between backprop and central differences.
///
/// Entries near zero are dominated by cancellation in the difference quotient,
/// so the error is measured on the whole gradient vector.
pub fn gradient_check(seed: u64, mode: exactmesh::train::TrainMode, alpha: f64) -> f64 {
    use exactmesh::baseline::AnalyticShape;
    use exactmesh::train::{loss_and_grad, loss_value, sample_batch, Mlp, TrainConfig};
    let mut r = rng(seed);
    let depth = r.random_range(1..=3);
    let widths: Vec<usize> = (0..depth).map(|_| r.random_range(2..=8)).collect();
    let mut mlp = Mlp::init(&widths, 0.4, &mut r);
    let jittered: Vec<f64> = mlp.params().iter().map(|p| p + gauss(&mut r, 0.1)).collect();
    mlp.set_params(&jittered);
    let cfg = TrainConfig { widths, mode, ..TrainConfig::default() };
    let shape = AnalyticShape::Sphere { r: 0.5 };
    let batch = sample_batch(&shape, 16, cfg.near_sigma, &cfg.bbox, true, &mut r);
    let (_, grad) = loss_and_grad(&mlp, &batch, &cfg, alpha);
    let analytic = DVector::from_vec(grad.params());
    let base = mlp.params();
    let h = 1e-5;
    let fd = DVector::from_fn(base.len(), |i, _| {
        let mut p = base.clone();
        p[i] = base[i] + h;
        mlp.set_params(&p);
        let up = loss_value(&mlp, &batch, &cfg, alpha);
        p[i] = base[i] - h;
        mlp.set_params(&p);
        let down = loss_value(&mlp, &batch, &cfg, alpha);
        (up - down) / (2.0 * h)
    });
    (&analytic - &fd).norm() / analytic.norm().max(fd.norm()).max(1e-12)
}
