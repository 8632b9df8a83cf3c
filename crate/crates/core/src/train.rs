//! Direct shape encoding: fit a small ReLU MLP to an analytic shape.
//!
//! Training runs on a soft-ReLU copy of the network, `g_a(x) = x * sigmoid(a x)`,
//! with the slope `a` annealed geometrically towards a large value; the
//! returned network uses plain ReLU. Gradients are computed by a manual
//! batched reverse pass. The eikonal and normal terms use central differences
//! in the input, so their weight gradients reuse the same reverse pass.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::AnalyticShape;
use crate::net::{Dense, FieldKind, Head, LayerSpec, NetworkSpec};
use crate::trigger::seed_rng;
use crate::{Aabb, Vec3};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("initial network must be a single dense MLP: {0}")]
    Init(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (alpha {alpha}, lr {lr}, last finite loss {last})")]
    NonFinite {
        epoch: usize,
        step: usize,
        alpha: f64,
        lr: f64,
        last: f64,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Mean absolute error against the target field.
    #[default]
    Regression,
    /// Regression plus unit-gradient and surface terms.
    Eikonal,
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "regression" => Ok(TrainMode::Regression),
            "eikonal" => Ok(TrainMode::Eikonal),
            _ => Err(format!("unknown training mode `{s}` (expected regression or eikonal)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball SGD with `momentum`.
    #[default]
    Sgd,
    /// Adam with first-moment decay `momentum` and second-moment decay 0.999.
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(format!("unknown optimizer `{s}` (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hidden layer widths; all layers are dense.
    pub widths: Vec<usize>,
    pub mode: TrainMode,
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub momentum: f64,
    /// `(fraction of epochs, factor)`; the rate is multiplied by `factor` once that epoch is reached.
    pub lr_drops: Vec<(f64, f64)>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Standard deviation of the offset applied to near-surface samples.
    pub near_sigma: f64,
    /// Input step for the finite-difference gradient in eikonal mode.
    pub fd_step: f64,
    pub bbox: Aabb,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            widths: vec![16; 4],
            mode: TrainMode::Regression,
            batch: 256,
            epochs: 2000,
            steps_per_epoch: 4,
            optimizer: Optimizer::Sgd,
            lr: 1e-2,
            momentum: 0.9,
            lr_drops: [1100.0, 1200.0, 1350.0, 1450.0].iter().map(|e| (e / 1500.0, 0.3)).collect(),
            lambda1: 0.2,
            lambda2: 1.0,
            alpha_start: 10.0,
            alpha_end: 10_000.0,
            near_sigma: 0.05,
            fd_step: 1e-3,
            bbox: Aabb::cube(1.0),
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.widths.contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.batch == 0 || self.steps_per_epoch == 0 {
            return bad("batch and steps_per_epoch must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be positive and momentum in [0, 1)");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("penalties must be non-negative");
        }
        if !(self.alpha_start > 0.0 && self.alpha_end >= self.alpha_start) {
            return bad("alpha schedule must be positive and non-decreasing");
        }
        if self.lr_drops.iter().any(|(f, k)| !(*f >= 0.0 && *k > 0.0)) {
            return bad("learning-rate drops need non-negative fractions and positive factors");
        }
        if !(self.near_sigma >= 0.0 && self.fd_step > 0.0) || !self.bbox.is_valid() {
            return bad("sampling parameters out of range");
        }
        Ok(())
    }

    /// Slope of the soft ReLU at `epoch`, geometric from start to end.
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.alpha_start;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.alpha_start * (self.alpha_end / self.alpha_start).powf(t)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for (frac, k) in &self.lr_drops {
            if epoch as f64 >= frac * self.epochs as f64 {
                lr *= k;
            }
        }
        lr
    }
}

/// Parse `16x4` (width x depth) or `32,32,16` into hidden widths.
pub fn parse_arch(s: &str) -> std::result::Result<Vec<usize>, String> {
    let bad = || format!("bad architecture `{s}` (expected WIDTHxDEPTH or W1,W2,...)");
    let widths: Vec<usize> = if let Some((w, d)) = s.split_once('x') {
        let w: usize = w.trim().parse().map_err(|_| bad())?;
        let d: usize = d.trim().parse().map_err(|_| bad())?;
        vec![w; d]
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<std::result::Result<_, _>>()?
    };
    if widths.is_empty() || widths.contains(&0) {
        return Err(bad());
    }
    Ok(widths)
}

/// `x * sigmoid(a x)`, or ReLU when `a` is infinite.
pub fn soft_relu(x: f64, alpha: f64) -> f64 {
    if alpha.is_infinite() {
        x.max(0.0)
    } else {
        x * sigmoid(alpha * x)
    }
}

fn soft_relu_grad(x: f64, alpha: f64) -> f64 {
    if alpha.is_infinite() {
        return if x > 0.0 { 1.0 } else { 0.0 };
    }
    let s = sigmoid(alpha * x);
    s + alpha * x * s * (1.0 - s)
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Dense MLP parameters in training form; also used for gradients and momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub head: DVector<f64>,
    pub head_bias: f64,
}

/// Activations kept for the reverse pass.
struct Tape {
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
    input: DMatrix<f64>,
}

impl Mlp {
    /// He-normal weights and zero biases, head centred so `F(0) = -r0`.
    pub fn init(widths: &[usize], r0: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = 3;
        for &w in widths {
            let s = (2.0 / fan_in as f64).sqrt();
            let weight = DMatrix::from_fn(w, fan_in, |_, _| {
                let v: f64 = StandardNormal.sample(&mut *rng);
                s * v
            });
            layers.push((weight, DVector::zeros(w)));
            fan_in = w;
        }
        let s = (1.0 / fan_in as f64).sqrt();
        let head = DVector::from_fn(fan_in, |_, _| {
                let v: f64 = StandardNormal.sample(&mut *rng);
                s * v
            });
        let mut mlp = Self {
            layers,
            head,
            head_bias: 0.0,
        };
        let f0 = mlp.forward(&[Vec3::zeros()], f64::INFINITY)[0];
        mlp.head_bias = -f0 - r0;
        mlp
    }

    pub fn from_spec(net: &NetworkSpec) -> Result<Self> {
        if net.subnetworks.len() != 1 {
            return Err(TrainError::Init("ensembles are not trainable".into()));
        }
        let sub = &net.subnetworks[0];
        let layers = sub
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dense(d) => Ok((d.weight.clone(), d.bias.clone())),
                _ => Err(TrainError::Init("residual layers are not trainable".into())),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            head: sub.head.weight.clone(),
            head_bias: sub.head.bias,
        })
    }

    pub fn to_spec(&self) -> NetworkSpec {
        let layers = self
            .layers
            .iter()
            .map(|(w, b)| LayerSpec::Dense(Dense::new(w.clone(), b.clone())))
            .collect();
        NetworkSpec::single(
            FieldKind::Sdf,
            layers,
            Head {
                weight: self.head.clone(),
                bias: self.head_bias,
            },
        )
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|(w, _)| w.nrows()).collect()
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (DMatrix::zeros(w.nrows(), w.ncols()), DVector::zeros(b.len())))
                .collect(),
            head: DVector::zeros(self.head.len()),
            head_bias: 0.0,
        }
    }

    /// Every parameter in a fixed order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out.extend_from_slice(self.head.as_slice());
        out.push(self.head_bias);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = Vec::new();
        for (w, b) in &mut self.layers {
            out.extend(w.as_mut_slice().iter_mut());
            out.extend(b.as_mut_slice().iter_mut());
        }
        out.extend(self.head.as_mut_slice().iter_mut());
        out.push(&mut self.head_bias);
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        for (p, v) in self.params_mut().into_iter().zip(values) {
            *p = *v;
        }
    }

    fn run(&self, xs: &[Vec3], alpha: f64) -> (Tape, Vec<f64>) {
        let input = DMatrix::from_fn(3, xs.len(), |i, j| xs[j][i]);
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        for (w, b) in &self.layers {
            let prev = post.last().unwrap_or(&input);
            let mut z = w * prev;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            let h = z.map(|v| soft_relu(v, alpha));
            pre.push(z);
            post.push(h);
        }
        let last = post.last().unwrap_or(&input);
        let f = last.tr_mul(&self.head).map(|v| v + self.head_bias);
        (Tape { pre, post, input }, f.as_slice().to_vec())
    }

    pub fn forward(&self, xs: &[Vec3], alpha: f64) -> Vec<f64> {
        self.run(xs, alpha).1
    }

    /// Weight gradients of `sum_i dl_df[i] * F(x_i)`.
    pub fn backprop(&self, xs: &[Vec3], alpha: f64, dl_df: &[f64]) -> Self {
        let (tape, _) = self.run(xs, alpha);
        self.reverse(&tape, alpha, dl_df)
    }

    fn reverse(&self, tape: &Tape, alpha: f64, dl_df: &[f64]) -> Self {
        let mut g = self.zeros_like();
        let df = DVector::from_column_slice(dl_df);
        let last = tape.post.last().unwrap_or(&tape.input);
        g.head = last * &df;
        g.head_bias = dl_df.iter().sum();
        if self.layers.is_empty() {
            return g;
        }
        // Gradient with respect to the output of the current layer.
        let mut delta = &self.head * df.transpose();
        for l in (0..self.layers.len()).rev() {
            delta.zip_apply(&tape.pre[l], |d, z| *d *= soft_relu_grad(z, alpha));
            let prev = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            g.layers[l].0 = &delta * prev.transpose();
            g.layers[l].1 = delta.column_sum();
            if l > 0 {
                delta = self.layers[l].0.tr_mul(&delta);
            }
        }
        g
    }
}

/// One training batch with its targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub points: Vec<Vec3>,
    pub targets: Vec<f64>,
    /// Surface points and outward normals; used in eikonal mode.
    pub surface: Vec<(Vec3, Vec3)>,
}

/// Half near-surface, half uniform samples with their regression targets.
pub fn sample_batch(shape: &AnalyticShape, n: usize, sigma: f64, bbox: &Aabb, with_surface: bool, rng: &mut ChaCha8Rng) -> Batch {
    let near = n / 2;
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut points = Vec::with_capacity(n);
    for _ in 0..near {
        let p = shape.sample_point(rng);
        points.push(p + Vec3::from_fn(|_, _| noise.sample(rng)));
    }
    for _ in near..n {
        let u = Vec3::from_fn(|_, _| rng.random::<f64>());
        points.push(bbox.lerp(&u));
    }
    let targets = points.iter().map(|p| shape.regression_target(p)).collect();
    let surface = if with_surface {
        (0..near.max(1))
            .map(|_| {
                let z = shape.sample_point(rng);
                (z, shape.normal(&z))
            })
            .collect()
    } else {
        Vec::new()
    };
    Batch { points, targets, surface }
}

/// Terms of the training objective that need evaluation at given points.
struct Objective<'a> {
    mode: TrainMode,
    lambda1: f64,
    lambda2: f64,
    h: f64,
    batch: &'a Batch,
}

impl Objective<'_> {
    /// All evaluation points: regression points, their stencils, surface points, their stencils.
    fn points(&self) -> Vec<Vec3> {
        let mut out = self.batch.points.clone();
        if self.mode == TrainMode::Eikonal {
            for p in &self.batch.points {
                out.extend(self.stencil(p));
            }
            for (z, _) in &self.batch.surface {
                out.push(*z);
                out.extend(self.stencil(z));
            }
        }
        out
    }

    fn stencil(&self, p: &Vec3) -> [Vec3; 6] {
        let mut s = [*p; 6];
        for k in 0..3 {
            s[2 * k][k] += self.h;
            s[2 * k + 1][k] -= self.h;
        }
        s
    }

    fn fd_grad(&self, f: &[f64]) -> Vec3 {
        Vec3::new(
            (f[0] - f[1]) / (2.0 * self.h),
            (f[2] - f[3]) / (2.0 * self.h),
            (f[4] - f[5]) / (2.0 * self.h),
        )
    }

    /// Loss value and its derivative with respect to every evaluated `F`.
    fn loss(&self, f: &[f64]) -> (f64, Vec<f64>) {
        let n = self.batch.points.len();
        let mut d = vec![0.0; f.len()];
        let mut loss = 0.0;
        let inv = 1.0 / n as f64;
        for i in 0..n {
            let r = f[i] - self.batch.targets[i];
            loss += r.abs() * inv;
            d[i] = r.signum() * inv;
        }
        if self.mode == TrainMode::Regression {
            return (loss, d);
        }
        let scale = 1.0 / (2.0 * self.h);
        // Unit gradient norm at the regression points.
        for i in 0..n {
            let base = n + 6 * i;
            let g = self.fd_grad(&f[base..base + 6]);
            let norm = g.norm();
            loss += self.lambda1 * (norm - 1.0).abs() * inv;
            if norm > 0.0 {
                let c = self.lambda1 * (norm - 1.0).signum() * inv * scale / norm;
                for k in 0..3 {
                    d[base + 2 * k] += c * g[k];
                    d[base + 2 * k + 1] -= c * g[k];
                }
            }
        }
        // Surface value and normal alignment.
        let m = self.batch.surface.len();
        let minv = 1.0 / m as f64;
        for (j, (_, nz)) in self.batch.surface.iter().enumerate() {
            let base = 7 * n + 7 * j;
            loss += f[base].abs() * minv;
            d[base] += f[base].signum() * minv;
            let diff = self.fd_grad(&f[base + 1..base + 7]) - nz;
            let dn = diff.norm();
            loss += self.lambda2 * dn * minv;
            if dn > 0.0 {
                let c = self.lambda2 * minv * scale / dn;
                for k in 0..3 {
                    d[base + 1 + 2 * k] += c * diff[k];
                    d[base + 2 + 2 * k] -= c * diff[k];
                }
            }
        }
        (loss, d)
    }
}

/// Loss and weight gradient of the objective on one batch.
pub fn loss_and_grad(mlp: &Mlp, batch: &Batch, cfg: &TrainConfig, alpha: f64) -> (f64, Mlp) {
    let obj = objective(batch, cfg);
    let xs = obj.points();
    let (tape, f) = mlp.run(&xs, alpha);
    let (loss, d) = obj.loss(&f);
    (loss, mlp.reverse(&tape, alpha, &d))
}

/// Loss only, for finite-difference checks.
pub fn loss_value(mlp: &Mlp, batch: &Batch, cfg: &TrainConfig, alpha: f64) -> f64 {
    let obj = objective(batch, cfg);
    obj.loss(&mlp.forward(&obj.points(), alpha)).0
}

fn objective<'a>(batch: &'a Batch, cfg: &TrainConfig) -> Objective<'a> {
    Objective {
        mode: cfg.mode,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        h: cfg.fd_step,
        batch,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub net: NetworkSpec,
    pub log: Vec<EpochLog>,
}

/// Fit a dense ReLU MLP to `shape`. `init` replaces the random initialization.
pub fn fit_direct(shape: &AnalyticShape, cfg: &TrainConfig, init: Option<&NetworkSpec>) -> Result<Fitted> {
    cfg.validate()?;
    let mut rng = seed_rng(cfg.rng_seed, 0);
    let mut mlp = match init {
        Some(net) => Mlp::from_spec(net)?,
        None => Mlp::init(&cfg.widths, typical_radius(shape), &mut rng),
    };
    let mut velocity = mlp.zeros_like();
    let mut second = mlp.zeros_like();
    let mut t = 0i32;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last = f64::NAN;
    let with_surface = cfg.mode == TrainMode::Eikonal;
    for epoch in 0..cfg.epochs {
        let alpha = cfg.alpha_at(epoch);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let batch = sample_batch(shape, cfg.batch, cfg.near_sigma, &cfg.bbox, with_surface, &mut rng);
            let (loss, grad) = loss_and_grad(&mlp, &batch, cfg, alpha);
            let gnorm_ok = grad.params().iter().all(|g| g.is_finite());
            if !loss.is_finite() || !gnorm_ok {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    alpha,
                    lr,
                    last,
                });
            }
            t += 1;
            let params = mlp.params_mut().into_iter().zip(velocity.params_mut()).zip(second.params_mut());
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (((p, v), _), g) in params.zip(grad.params()) {
                        *v = cfg.momentum * *v - lr * g;
                        *p += *v;
                    }
                }
                Optimizer::Adam => {
                    let (b1, b2): (f64, f64) = (cfg.momentum, 0.999);
                    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    for (((p, m), v), g) in params.zip(grad.params()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                    }
                }
            }
            total += loss;
            last = loss;
        }
        let entry = EpochLog {
            epoch,
            loss: total / cfg.steps_per_epoch as f64,
            lr,
            alpha,
        };
        log::debug!("epoch {epoch}: loss {:.6e} lr {lr:.3e} alpha {alpha:.3e}", entry.loss);
        log.push(entry);
    }
    Ok(Fitted { net: mlp.to_spec(), log })
}

fn typical_radius(shape: &AnalyticShape) -> f64 {
    match *shape {
        AnalyticShape::Sphere { r } => r,
        AnalyticShape::Box { half } => half.min(),
        AnalyticShape::Torus { minor, .. } => minor,
        AnalyticShape::L1Ball { c } => c / 3f64.sqrt(),
    }
}

/// Mean `|F - target|` of a ReLU network on fresh samples from the training distribution.
pub fn held_out_error(net: &NetworkSpec, shape: &AnalyticShape, n: usize, cfg: &TrainConfig, rng_seed: u64) -> f64 {
    let mut rng = seed_rng(rng_seed, 1);
    let batch = sample_batch(shape, n, cfg.near_sigma, &cfg.bbox, false, &mut rng);
    let total: f64 = batch.points.iter().zip(&batch.targets).map(|(p, t)| (net.forward(p) - t).abs()).sum();
    total / n as f64
}
