//! Implicit surface networks: representation, evaluation, activation states,
//! region-wise affine maps and the JSON interchange format.

use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3xX};
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("dimension mismatch in {location}: {message}")]
    Dimension { location: String, message: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("forward evaluation produced NaN at ({x}, {y}, {z})")]
    NanOutput { x: f64, y: f64, z: f64 },
    #[error("state has {got} bits, network has {expected} hidden neurons")]
    StateLength { expected: usize, got: usize },
    #[error("width {width} is smaller than n0 = {n0}")]
    WidthBelowInput { width: usize, n0: usize },
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Affine functional `normal . x + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinePlane {
    pub normal: Vec3,
    pub offset: f64,
}

impl AffinePlane {
    pub fn new(normal: Vec3, offset: f64) -> Self {
        Self { normal, offset }
    }

    #[inline]
    pub fn eval(&self, x: &Vec3) -> f64 {
        self.normal.dot(x) + self.offset
    }

    pub fn is_degenerate(&self) -> bool {
        self.normal.norm() == 0.0
    }

    /// Same plane scaled to a unit normal, `None` for a zero normal.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.normal.norm();
        (n > 0.0).then(|| Self::new(self.normal / n, self.offset / n))
    }

    pub fn negated(&self) -> Self {
        Self::new(-self.normal, -self.offset)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.normal * s, self.offset * s)
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::new(self.normal - other.normal, self.offset - other.offset)
    }

    /// Orthogonal projection of `x` onto the zero set.
    pub fn project(&self, x: &Vec3) -> Vec3 {
        let nn = self.normal.norm_squared();
        if nn == 0.0 {
            return *x;
        }
        x - self.normal * (self.eval(x) / nn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Sdf,
    Occupancy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Self {
        Self { weight, bias }
    }

    pub fn from_rows(rows: &[&[f64]], bias: &[f64]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        let weight = DMatrix::from_fn(n, m, |i, j| rows[i][j]);
        Self::new(weight, DVector::from_column_slice(bias))
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense(Dense),
    /// `relu(x + inner(x))`, the last inner layer has no activation of its own.
    ResidualIdentity { inner: Vec<Dense> },
    /// `relu(V x + c + inner(x))`.
    ResidualLinear { inner: Vec<Dense>, shortcut: Dense },
}

impl LayerSpec {
    pub fn out_dim(&self) -> usize {
        match self {
            LayerSpec::Dense(d) => d.out_dim(),
            LayerSpec::ResidualIdentity { inner } | LayerSpec::ResidualLinear { inner, .. } => {
                inner.last().map_or(0, |d| d.out_dim())
            }
        }
    }

    /// Hidden neurons contributed to the state vector.
    pub fn neuron_count(&self) -> usize {
        match self {
            LayerSpec::Dense(d) => d.out_dim(),
            LayerSpec::ResidualIdentity { inner } | LayerSpec::ResidualLinear { inner, .. } => {
                inner.iter().map(|d| d.out_dim()).sum()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: DVector<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subnetwork {
    pub layers: Vec<LayerSpec>,
    pub head: Head,
}

impl Subnetwork {
    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(|l| l.neuron_count()).sum()
    }

    /// Widths of dense layers; `None` if any layer is residual.
    pub fn dense_widths(&self) -> Option<Vec<usize>> {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dense(d) => Some(d.out_dim()),
                _ => None,
            })
            .collect()
    }
}

/// A plain network has one subnetwork; more than one is a max-pool ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub field_kind: FieldKind,
    pub subnetworks: Vec<Subnetwork>,
}

/// Location of a hidden neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NeuronId {
    pub subnet: usize,
    pub layer: usize,
    pub unit: usize,
}

/// Activation pattern labelling a linear region.
#[derive(Debug, Clone, Eq, PartialOrd, Ord)]
pub struct StateVector {
    words: Vec<u64>,
    len: usize,
    pub branch: Option<usize>,
}

impl PartialEq for StateVector {
    fn eq(&self, other: &Self) -> bool {
        self.len == other.len && self.branch == other.branch && self.words == other.words
    }
}

impl Hash for StateVector {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.len.hash(state);
        self.branch.hash(state);
        self.words.hash(state);
    }
}

impl StateVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
            branch: None,
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut s = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            s.set(i, b);
        }
        s
    }

    pub fn with_branch(mut self, branch: Option<usize>) -> Self {
        self.branch = branch;
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        debug_assert!(i < self.len);
        let mask = 1u64 << (i % 64);
        if v {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn flip(&mut self, i: usize) {
        let v = self.get(i);
        self.set(i, !v);
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

impl std::fmt::Display for StateVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        if let Some(b) = self.branch {
            write!(f, "#{b}")?;
        }
        Ok(())
    }
}

/// Planes describing one linear region.
#[derive(Debug, Clone)]
pub struct RegionMaps {
    /// Pre-activation of every hidden neuron, in state order.
    pub neuron_planes: Vec<AffinePlane>,
    /// Face plane of each subnetwork.
    pub subnet_faces: Vec<AffinePlane>,
    /// Face plane of the active branch, equal to F on the region.
    pub face_plane: AffinePlane,
    /// `(i, F_i - F_j)` for every non-selected branch `i`, `j` the selected one.
    pub branch_planes: Vec<(usize, AffinePlane)>,
}

/// Affine function of the input for a stack of units: row `k` is `rows[k] . x + offs[k]`.
#[derive(Clone)]
struct AffineStack {
    lin: Matrix3xX<f64>,
    off: DVector<f64>,
}

impl AffineStack {
    fn identity() -> Self {
        Self {
            lin: Matrix3xX::from_column_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            off: DVector::zeros(3),
        }
    }

    fn len(&self) -> usize {
        self.off.len()
    }

    fn plane(&self, k: usize) -> AffinePlane {
        AffinePlane::new(self.lin.column(k).into_owned(), self.off[k])
    }

    /// `W h + b` for the stack `h`.
    fn apply(&self, d: &Dense) -> Self {
        Self {
            lin: &self.lin * d.weight.transpose(),
            off: &d.weight * &self.off + &d.bias,
        }
    }

    fn add(&mut self, other: &Self) {
        self.lin += &other.lin;
        self.off += &other.off;
    }

    fn mask(&mut self, active: &[bool]) {
        for (k, &a) in active.iter().enumerate() {
            if !a {
                self.lin.column_mut(k).fill(0.0);
                self.off[k] = 0.0;
            }
        }
    }
}

/// How hidden-unit activations are decided while propagating affine maps.
trait Decider {
    fn decide(&mut self, neuron: usize, plane: &AffinePlane) -> bool;
}

struct FromState<'a>(&'a StateVector);

impl Decider for FromState<'_> {
    fn decide(&mut self, neuron: usize, _plane: &AffinePlane) -> bool {
        self.0.get(neuron)
    }
}

/// One-sided activation at `point`: sign of the value, then of the
/// directional derivatives along `dirs` in order when the value is zero.
pub(crate) struct Lexicographic<'a> {
    pub point: Vec3,
    pub dirs: &'a [Vec3],
    pub tol: f64,
}

impl Lexicographic<'_> {
    pub fn sign(&self, p: &AffinePlane) -> std::cmp::Ordering {
        use std::cmp::Ordering::*;
        let g = p.normal.norm();
        let v = p.eval(&self.point);
        let scale = g * (1.0 + self.point.norm());
        let zero = if g == 0.0 { 1e-12 } else { self.tol * scale };
        if v > zero {
            return Greater;
        }
        if v < -zero {
            return Less;
        }
        for d in self.dirs {
            let dd = p.normal.dot(d);
            if dd.abs() > 1e-12 * g * d.norm() {
                return if dd > 0.0 { Greater } else { Less };
            }
        }
        Equal
    }
}

impl Decider for Lexicographic<'_> {
    fn decide(&mut self, _neuron: usize, plane: &AffinePlane) -> bool {
        self.sign(plane) == std::cmp::Ordering::Greater
    }
}

struct Recorder<'a, D> {
    inner: D,
    planes: &'a mut Vec<AffinePlane>,
}

impl<D: Decider> Decider for Recorder<'_, D> {
    fn decide(&mut self, neuron: usize, plane: &AffinePlane) -> bool {
        self.planes.push(*plane);
        self.inner.decide(neuron, plane)
    }
}

impl NetworkSpec {
    pub fn single(field_kind: FieldKind, layers: Vec<LayerSpec>, head: Head) -> Self {
        Self {
            field_kind,
            subnetworks: vec![Subnetwork { layers, head }],
        }
    }

    pub fn is_ensemble(&self) -> bool {
        self.subnetworks.len() > 1
    }

    /// Total hidden-neuron count N.
    pub fn neuron_count(&self) -> usize {
        self.subnetworks.iter().map(|s| s.neuron_count()).sum()
    }

    /// Location of the `i`-th neuron in state order.
    pub fn neuron_id(&self, mut i: usize) -> Option<NeuronId> {
        for (si, sub) in self.subnetworks.iter().enumerate() {
            for (li, layer) in sub.layers.iter().enumerate() {
                let n = layer.neuron_count();
                if i < n {
                    return Some(NeuronId {
                        subnet: si,
                        layer: li,
                        unit: i,
                    });
                }
                i -= n;
            }
        }
        None
    }

    /// First state index of each subnetwork.
    fn subnet_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.subnetworks
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.neuron_count();
                o
            })
            .collect()
    }

    /// Checks dimensions and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.subnetworks.is_empty() {
            return Err(NetError::Invalid("no subnetworks".into()));
        }
        for (si, sub) in self.subnetworks.iter().enumerate() {
            let mut width = 3usize;
            let check_dense = |d: &Dense, loc: &str, input: usize| -> Result<()> {
                if d.in_dim() != input {
                    return Err(NetError::Dimension {
                        location: loc.to_string(),
                        message: format!(
                            "weight has {} columns but input width is {input}",
                            d.in_dim()
                        ),
                    });
                }
                if d.bias.len() != d.out_dim() {
                    return Err(NetError::Dimension {
                        location: loc.to_string(),
                        message: format!(
                            "bias has length {} but weight has {} rows",
                            d.bias.len(),
                            d.out_dim()
                        ),
                    });
                }
                if d.out_dim() == 0 {
                    return Err(NetError::Dimension {
                        location: loc.to_string(),
                        message: "layer has zero width".into(),
                    });
                }
                if d.weight.iter().chain(d.bias.iter()).any(|v| !v.is_finite()) {
                    return Err(NetError::NonFinite(loc.to_string()));
                }
                Ok(())
            };
            for (li, layer) in sub.layers.iter().enumerate() {
                let loc = format!("subnetwork {si}, layer {li}");
                match layer {
                    LayerSpec::Dense(d) => {
                        check_dense(d, &loc, width)?;
                        width = d.out_dim();
                    }
                    LayerSpec::ResidualIdentity { inner } | LayerSpec::ResidualLinear { inner, .. } => {
                        if inner.is_empty() {
                            return Err(NetError::Dimension {
                                location: loc,
                                message: "residual block has no inner layers".into(),
                            });
                        }
                        let mut w = width;
                        for (ii, d) in inner.iter().enumerate() {
                            check_dense(d, &format!("{loc}, inner {ii}"), w)?;
                            w = d.out_dim();
                        }
                        match layer {
                            LayerSpec::ResidualIdentity { .. } => {
                                if w != width {
                                    return Err(NetError::Dimension {
                                        location: loc,
                                        message: format!(
                                            "identity block maps width {width} to {w}"
                                        ),
                                    });
                                }
                            }
                            LayerSpec::ResidualLinear { shortcut, .. } => {
                                check_dense(shortcut, &format!("{loc}, shortcut"), width)?;
                                if shortcut.out_dim() != w {
                                    return Err(NetError::Dimension {
                                        location: loc,
                                        message: format!(
                                            "shortcut has {} rows but block output width is {w}",
                                            shortcut.out_dim()
                                        ),
                                    });
                                }
                            }
                            LayerSpec::Dense(_) => unreachable!(),
                        }
                        width = w;
                    }
                }
            }
            if sub.head.weight.len() != width {
                return Err(NetError::Dimension {
                    location: format!("subnetwork {si}, head"),
                    message: format!(
                        "weight length {} but last layer width is {width}",
                        sub.head.weight.len()
                    ),
                });
            }
            if sub.head.weight.iter().any(|v| !v.is_finite()) || !sub.head.bias.is_finite() {
                return Err(NetError::NonFinite(format!("subnetwork {si}, head")));
            }
        }
        Ok(())
    }

    /// Subnetwork values at `x`, also writing pre-activations when `pre` is given.
    fn subnet_values(&self, x: &Vec3, mut pre: Option<&mut Vec<f64>>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.subnetworks.len());
        for sub in &self.subnetworks {
            let mut h = DVector::from_column_slice(x.as_slice());
            for layer in &sub.layers {
                h = match layer {
                    LayerSpec::Dense(d) => {
                        let z = &d.weight * &h + &d.bias;
                        if let Some(p) = pre.as_deref_mut() {
                            p.extend(z.iter());
                        }
                        z.map(relu)
                    }
                    LayerSpec::ResidualIdentity { inner } | LayerSpec::ResidualLinear { inner, .. } => {
                        let mut u = h.clone();
                        let last = inner.len() - 1;
                        for (ii, d) in inner.iter().enumerate() {
                            let z = &d.weight * &u + &d.bias;
                            if ii < last {
                                if let Some(p) = pre.as_deref_mut() {
                                    p.extend(z.iter());
                                }
                                u = z.map(relu);
                            } else {
                                u = z;
                            }
                        }
                        let merged = match layer {
                            LayerSpec::ResidualLinear { shortcut, .. } => {
                                &shortcut.weight * &h + &shortcut.bias + u
                            }
                            _ => h + u,
                        };
                        if let Some(p) = pre.as_deref_mut() {
                            p.extend(merged.iter());
                        }
                        merged.map(relu)
                    }
                };
            }
            out.push(sub.head.weight.dot(&h) + sub.head.bias);
        }
        out
    }

    /// F(x); the pre-sigmoid logit for occupancy nets.
    pub fn forward(&self, x: &Vec3) -> f64 {
        let vals = self.subnet_values(x, None);
        vals[argmax(&vals)]
    }

    /// F at many points; one matrix product per layer.
    pub fn forward_batch(&self, xs: &[Vec3]) -> Vec<f64> {
        let input = DMatrix::from_fn(3, xs.len(), |i, j| xs[j][i]);
        let affine = |d: &Dense, h: &DMatrix<f64>| {
            let mut z = &d.weight * h;
            for mut col in z.column_iter_mut() {
                col += &d.bias;
            }
            z
        };
        let mut best = vec![f64::NEG_INFINITY; xs.len()];
        for (si, sub) in self.subnetworks.iter().enumerate() {
            let mut h = input.clone();
            for layer in &sub.layers {
                h = match layer {
                    LayerSpec::Dense(d) => affine(d, &h).map(relu),
                    LayerSpec::ResidualIdentity { inner } | LayerSpec::ResidualLinear { inner, .. } => {
                        let mut u = h.clone();
                        let last = inner.len() - 1;
                        for (ii, d) in inner.iter().enumerate() {
                            u = affine(d, &u);
                            if ii < last {
                                u.apply(|v| *v = relu(*v));
                            }
                        }
                        let merged = match layer {
                            LayerSpec::ResidualLinear { shortcut, .. } => affine(shortcut, &h) + u,
                            _ => h + u,
                        };
                        merged.map(relu)
                    }
                };
            }
            let f = h.tr_mul(&sub.head.weight);
            for (b, v) in best.iter_mut().zip(f.iter()) {
                let v = v + sub.head.bias;
                // Strict comparison keeps the lowest index on ties, as in `argmax`.
                if si == 0 || v > *b {
                    *b = v;
                }
            }
        }
        best
    }

    /// F(x) with NaN reported as an error.
    pub fn try_forward(&self, x: &Vec3) -> Result<f64> {
        let v = self.forward(x);
        if v.is_nan() {
            return Err(NetError::NanOutput {
                x: x.x,
                y: x.y,
                z: x.z,
            });
        }
        Ok(v)
    }

    /// All hidden pre-activations in state order, plus subnetwork outputs.
    pub fn preactivations(&self, x: &Vec3) -> (Vec<f64>, Vec<f64>) {
        let mut pre = Vec::with_capacity(self.neuron_count());
        let vals = self.subnet_values(x, Some(&mut pre));
        (pre, vals)
    }

    pub fn state_at(&self, x: &Vec3) -> StateVector {
        let (pre, vals) = self.preactivations(x);
        let mut s = StateVector::zeros(pre.len());
        for (i, &v) in pre.iter().enumerate() {
            if v > 0.0 {
                s.set(i, true);
            }
        }
        let branch = self.is_ensemble().then(|| argmax(&vals));
        s.with_branch(branch)
    }

    /// Gradient of F on the region containing `x`.
    pub fn grad_input(&self, x: &Vec3) -> Vec3 {
        self.affine_maps(&self.state_at(x))
            .map(|m| m.face_plane.normal)
            .unwrap_or_else(|_| Vec3::zeros())
    }

    /// F and its gradient at `x`.
    pub fn value_and_grad(&self, x: &Vec3) -> (f64, Vec3) {
        (self.forward(x), self.grad_input(x))
    }

    /// Propagates affine maps through a subnetwork, returning its face plane.
    fn propagate_subnet<D: Decider>(&self, sub: &Subnetwork, base: usize, dec: &mut D) -> AffinePlane {
        let mut h = AffineStack::identity();
        let mut idx = base;
        let decide_all = |z: &AffineStack, idx: &mut usize, dec: &mut D| -> Vec<bool> {
            (0..z.len())
                .map(|k| {
                    let a = dec.decide(*idx, &z.plane(k));
                    *idx += 1;
                    a
                })
                .collect()
        };
        for layer in &sub.layers {
            h = match layer {
                LayerSpec::Dense(d) => {
                    let mut z = h.apply(d);
                    let act = decide_all(&z, &mut idx, dec);
                    z.mask(&act);
                    z
                }
                LayerSpec::ResidualIdentity { inner } | LayerSpec::ResidualLinear { inner, .. } => {
                    let mut u = h.clone();
                    let last = inner.len() - 1;
                    for (ii, d) in inner.iter().enumerate() {
                        u = u.apply(d);
                        if ii < last {
                            let act = decide_all(&u, &mut idx, dec);
                            u.mask(&act);
                        }
                    }
                    let mut merged = match layer {
                        LayerSpec::ResidualLinear { shortcut, .. } => h.apply(shortcut),
                        _ => h,
                    };
                    merged.add(&u);
                    let act = decide_all(&merged, &mut idx, dec);
                    merged.mask(&act);
                    merged
                }
            };
        }
        let w = &sub.head.weight;
        AffinePlane::new(&h.lin * w, h.off.dot(w) + sub.head.bias)
    }

    /// Neuron planes and face plane of the region labelled `s`.
    pub fn affine_maps(&self, s: &StateVector) -> Result<RegionMaps> {
        let n = self.neuron_count();
        if s.len() != n {
            return Err(NetError::StateLength {
                expected: n,
                got: s.len(),
            });
        }
        let mut planes = Vec::with_capacity(n);
        let mut faces = Vec::with_capacity(self.subnetworks.len());
        for (sub, base) in self.subnetworks.iter().zip(self.subnet_offsets()) {
            let mut rec = Recorder {
                inner: FromState(s),
                planes: &mut planes,
            };
            faces.push(self.propagate_subnet(sub, base, &mut rec));
        }
        Ok(self.assemble(planes, faces, s.branch.unwrap_or(0)))
    }

    fn assemble(&self, planes: Vec<AffinePlane>, faces: Vec<AffinePlane>, branch: usize) -> RegionMaps {
        let face = faces[branch.min(faces.len() - 1)];
        let branch_planes = if self.is_ensemble() {
            faces
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != branch)
                .map(|(i, f)| (i, f.sub(&face)))
                .collect()
        } else {
            Vec::new()
        };
        RegionMaps {
            neuron_planes: planes,
            subnet_faces: faces,
            face_plane: face,
            branch_planes,
        }
    }

    /// State of the region entered from `point` when moving along `dirs[0]`,
    /// ties broken by the following directions.
    pub fn directional_state(&self, point: &Vec3, dirs: &[Vec3], tol: f64) -> (StateVector, RegionMaps) {
        let n = self.neuron_count();
        let mut planes = Vec::with_capacity(n);
        let mut faces = Vec::with_capacity(self.subnetworks.len());
        let mut s = StateVector::zeros(n);
        let lex = Lexicographic {
            point: *point,
            dirs,
            tol,
        };
        for (sub, base) in self.subnetworks.iter().zip(self.subnet_offsets()) {
            let start = planes.len();
            let mut rec = Recorder {
                inner: Lexicographic {
                    point: *point,
                    dirs,
                    tol,
                },
                planes: &mut planes,
            };
            faces.push(self.propagate_subnet(sub, base, &mut rec));
            for (k, p) in planes[start..].iter().enumerate() {
                if lex.sign(p) == std::cmp::Ordering::Greater {
                    s.set(base + k, true);
                }
            }
        }
        let branch = if self.is_ensemble() {
            let mut best = 0;
            for i in 1..faces.len() {
                if lex.sign(&faces[i].sub(&faces[best])) == std::cmp::Ordering::Greater {
                    best = i;
                }
            }
            Some(best)
        } else {
            None
        };
        let maps = self.assemble(planes, faces, branch.unwrap_or(0));
        (s.with_branch(branch), maps)
    }

    /// Conservative bounds of F over an axis-aligned box.
    ///
    /// Each subnetwork is bounded by interval propagation and, for dense
    /// stacks, also by the mean-value form `F(c) +- sum_i r_i |dF/dx_i|` with an
    /// interval Jacobian; the tighter of the two is used. The mean-value form
    /// is far tighter on small boxes, where most neurons have a fixed sign.
    pub fn interval(&self, lo: &Vec3, hi: &Vec3) -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for sub in &self.subnetworks {
            let (mut a, mut b) = interval_subnet(sub, lo, hi);
            if let Some((c, d)) = centered_subnet(sub, lo, hi) {
                a = a.max(c);
                b = b.min(d);
            }
            best.0 = best.0.max(a);
            best.1 = best.1.max(b);
        }
        best
    }

    /// Same zero set with the logit convention: positive inside.
    ///
    /// Negating the heads does not commute with the max-pool, so ensembles are rejected.
    pub fn to_occupancy(&self, scale: f64) -> Result<Self> {
        if self.is_ensemble() {
            return Err(NetError::Invalid("occupancy conversion needs a single subnetwork".into()));
        }
        let mut out = self.clone();
        out.field_kind = FieldKind::Occupancy;
        for sub in &mut out.subnetworks {
            sub.head.weight *= -scale;
            sub.head.bias *= -scale;
        }
        Ok(out)
    }

    /// Whether `x` lies inside the solid described by the field.
    pub fn is_inside(&self, x: &Vec3) -> bool {
        let f = self.forward(x);
        match self.field_kind {
            FieldKind::Sdf => f < 0.0,
            FieldKind::Occupancy => f > 0.0,
        }
    }
}

fn interval_subnet(sub: &Subnetwork, lo: &Vec3, hi: &Vec3) -> (f64, f64) {
    let mut l = DVector::from_column_slice(lo.as_slice());
    let mut u = DVector::from_column_slice(hi.as_slice());
    for layer in &sub.layers {
        let (nl, nu) = match layer {
            LayerSpec::Dense(d) => interval_dense(d, &l, &u),
            LayerSpec::ResidualIdentity { inner } | LayerSpec::ResidualLinear { inner, .. } => {
                let (mut a, mut b) = (l.clone(), u.clone());
                let last = inner.len() - 1;
                for (ii, d) in inner.iter().enumerate() {
                    let (na, nb) = interval_dense(d, &a, &b);
                    if ii < last {
                        a = na.map(relu);
                        b = nb.map(relu);
                    } else {
                        a = na;
                        b = nb;
                    }
                }
                let (sa, sb) = match layer {
                    LayerSpec::ResidualLinear { shortcut, .. } => interval_dense(shortcut, &l, &u),
                    _ => (l.clone(), u.clone()),
                };
                (sa + a, sb + b)
            }
        };
        l = nl.map(relu);
        u = nu.map(relu);
    }
    let w = &sub.head.weight;
    let c = (&l + &u) * 0.5;
    let r = (&u - &l) * 0.5;
    let mid = w.dot(&c) + sub.head.bias;
    let rad = w.abs().dot(&r);
    (mid - rad, mid + rad)
}

/// Mean-value bound of a dense subnetwork; `None` if it has residual layers.
fn centered_subnet(sub: &Subnetwork, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let dense: Vec<&Dense> = sub
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Dense(d) => Some(d),
            _ => None,
        })
        .collect::<Option<_>>()?;
    let centre = (lo + hi) * 0.5;
    let radius = (hi - lo) * 0.5;
    // Forward: value at the centre and pre-activation bounds over the box.
    let mut h = DVector::from_column_slice(centre.as_slice());
    let mut l = DVector::from_column_slice(lo.as_slice());
    let mut u = DVector::from_column_slice(hi.as_slice());
    let mut pre = Vec::with_capacity(dense.len());
    for d in &dense {
        h = (&d.weight * &h + &d.bias).map(relu);
        let (pl, pu) = interval_dense(d, &l, &u);
        l = pl.map(relu);
        u = pu.map(relu);
        pre.push((pl, pu));
    }
    let value = sub.head.weight.dot(&h) + sub.head.bias;
    // Backward: interval Jacobian in midpoint-radius form.
    let mut gm = sub.head.weight.clone();
    let mut gr = DVector::zeros(gm.len());
    for (d, (pl, pu)) in dense.iter().zip(&pre).rev() {
        for k in 0..gm.len() {
            if pl[k] > 0.0 {
                continue;
            }
            if pu[k] < 0.0 {
                gm[k] = 0.0;
                gr[k] = 0.0;
            } else {
                let (a, b) = ((gm[k] - gr[k]).min(0.0), (gm[k] + gr[k]).max(0.0));
                gm[k] = 0.5 * (a + b);
                gr[k] = 0.5 * (b - a);
            }
        }
        gr = d.weight.abs().tr_mul(&gr);
        gm = d.weight.tr_mul(&gm);
    }
    let slope: f64 = (0..3).map(|i| (gm[i].abs() + gr[i]) * radius[i]).sum();
    Some((value - slope, value + slope))
}

fn interval_dense(d: &Dense, l: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let c = (l + u) * 0.5;
    let r = (u - l) * 0.5;
    let mid = &d.weight * c + &d.bias;
    let rad = d.weight.abs() * r;
    (&mid - &rad, mid + rad)
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Index of the maximum, lowest index on ties.
pub(crate) fn argmax(vals: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in vals.iter().enumerate().skip(1) {
        if v > vals[best] {
            best = i;
        }
    }
    best
}

/// Lower bound on the number of linear regions of a ReLU MLP.
pub fn region_count_lower_bound(widths: &[usize], n0: usize) -> Result<BigUint> {
    if n0 == 0 {
        return Err(NetError::Invalid("n0 must be at least 1".into()));
    }
    let Some((&last, hidden)) = widths.split_last() else {
        return Err(NetError::Invalid("widths must be non-empty".into()));
    };
    if let Some(&w) = widths.iter().find(|&&w| w < n0) {
        return Err(NetError::WidthBelowInput { width: w, n0 });
    }
    let mut prod = BigUint::from(1u32);
    for &w in hidden {
        prod *= BigUint::from(w / n0).pow(n0 as u32);
    }
    let mut sum = BigUint::from(0u32);
    let mut binom = BigUint::from(1u32);
    for j in 0..=n0.min(last) {
        if j > 0 {
            binom = binom * BigUint::from(last - j + 1) / BigUint::from(j);
        }
        sum += &binom;
    }
    Ok(prod * sum)
}

/// `2^neurons`, the number of distinct activation patterns.
pub fn state_space_size(neurons: usize) -> BigUint {
    BigUint::from(1u32) << neurons
}

/// Pairs of cells whose face planes are proportional within `tol` radians.
pub fn check_unique_planes(cells: &[(StateVector, AffinePlane)], tol: f64) -> Vec<(usize, usize)> {
    let mut keyed: Vec<(usize, [f64; 4])> = cells
        .iter()
        .enumerate()
        .filter_map(|(i, (_, p))| {
            let mut h = [p.normal.x, p.normal.y, p.normal.z, p.offset];
            let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return None;
            }
            h.iter_mut().for_each(|v| *v /= n);
            Some((i, h))
        })
        .collect();
    // Sorting on |h0| is sign invariant; the chord 2 sin(angle/2) is below the angle.
    keyed.sort_by(|a, b| a.1[0].abs().total_cmp(&b.1[0].abs()));
    let mut out = Vec::new();
    for a in 0..keyed.len() {
        for b in a + 1..keyed.len() {
            if keyed[b].1[0].abs() - keyed[a].1[0].abs() > tol {
                break;
            }
            let d2: f64 = (0..4).map(|k| (keyed[a].1[k] - keyed[b].1[k]).powi(2)).sum();
            let dm2: f64 = (0..4).map(|k| (keyed[a].1[k] + keyed[b].1[k]).powi(2)).sum();
            let d = d2.min(dm2).sqrt();
            let angle = 2.0 * (d / 2.0).min(1.0).asin();
            if angle < tol {
                let (i, j) = (keyed[a].0, keyed[b].0);
                out.push((i.min(j), i.max(j)));
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

// ---------------------------------------------------------------------------
// Interchange format

#[derive(Serialize, Deserialize)]
struct DocNetwork {
    field_kind: FieldKind,
    input_dim: usize,
    subnetworks: Vec<DocSubnet>,
}

#[derive(Serialize, Deserialize)]
struct DocSubnet {
    layers: Vec<DocLayer>,
    head: DocHead,
}

#[derive(Serialize, Deserialize)]
struct DocHead {
    weight: Vec<f64>,
    bias: f64,
}

#[derive(Serialize, Deserialize)]
struct DocDense {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DocLayer {
    Dense {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    ResidualIdentity {
        inner: Vec<DocDense>,
    },
    ResidualLinear {
        inner: Vec<DocDense>,
        shortcut_weight: Vec<Vec<f64>>,
        shortcut_bias: Vec<f64>,
    },
}

fn dense_from_doc(weight: &[Vec<f64>], bias: &[f64], loc: &str) -> Result<Dense> {
    let rows = weight.len();
    let cols = weight.first().map_or(0, |r| r.len());
    if let Some((i, r)) = weight.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(NetError::Dimension {
            location: loc.to_string(),
            message: format!("row {i} has {} entries, expected {cols}", r.len()),
        });
    }
    Ok(Dense::new(
        DMatrix::from_fn(rows, cols, |i, j| weight[i][j]),
        DVector::from_column_slice(bias),
    ))
}

fn dense_to_doc(d: &Dense) -> (Vec<Vec<f64>>, Vec<f64>) {
    let w = (0..d.out_dim())
        .map(|i| (0..d.in_dim()).map(|j| d.weight[(i, j)]).collect())
        .collect();
    (w, d.bias.iter().copied().collect())
}

impl NetworkSpec {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let doc: DocNetwork = serde_json::from_str(text).map_err(|e| NetError::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if doc.input_dim != 3 {
            return Err(NetError::Dimension {
                location: "input_dim".into(),
                message: format!("expected 3, got {}", doc.input_dim),
            });
        }
        let mut subs = Vec::with_capacity(doc.subnetworks.len());
        for (si, ds) in doc.subnetworks.iter().enumerate() {
            let mut layers = Vec::with_capacity(ds.layers.len());
            for (li, dl) in ds.layers.iter().enumerate() {
                let loc = format!("subnetwork {si}, layer {li}");
                let inner_of = |inner: &[DocDense]| -> Result<Vec<Dense>> {
                    inner
                        .iter()
                        .enumerate()
                        .map(|(ii, d)| dense_from_doc(&d.weight, &d.bias, &format!("{loc}, inner {ii}")))
                        .collect()
                };
                layers.push(match dl {
                    DocLayer::Dense { weight, bias } => LayerSpec::Dense(dense_from_doc(weight, bias, &loc)?),
                    DocLayer::ResidualIdentity { inner } => LayerSpec::ResidualIdentity {
                        inner: inner_of(inner)?,
                    },
                    DocLayer::ResidualLinear {
                        inner,
                        shortcut_weight,
                        shortcut_bias,
                    } => LayerSpec::ResidualLinear {
                        inner: inner_of(inner)?,
                        shortcut: dense_from_doc(shortcut_weight, shortcut_bias, &format!("{loc}, shortcut"))?,
                    },
                });
            }
            subs.push(Subnetwork {
                layers,
                head: Head {
                    weight: DVector::from_column_slice(&ds.head.weight),
                    bias: ds.head.bias,
                },
            });
        }
        let net = NetworkSpec {
            field_kind: doc.field_kind,
            subnetworks: subs,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn to_json_string(&self) -> String {
        let doc = DocNetwork {
            field_kind: self.field_kind,
            input_dim: 3,
            subnetworks: self
                .subnetworks
                .iter()
                .map(|s| DocSubnet {
                    layers: s
                        .layers
                        .iter()
                        .map(|l| match l {
                            LayerSpec::Dense(d) => {
                                let (weight, bias) = dense_to_doc(d);
                                DocLayer::Dense { weight, bias }
                            }
                            LayerSpec::ResidualIdentity { inner } => DocLayer::ResidualIdentity {
                                inner: inner.iter().map(doc_dense).collect(),
                            },
                            LayerSpec::ResidualLinear { inner, shortcut } => {
                                let (sw, sb) = dense_to_doc(shortcut);
                                DocLayer::ResidualLinear {
                                    inner: inner.iter().map(doc_dense).collect(),
                                    shortcut_weight: sw,
                                    shortcut_bias: sb,
                                }
                            }
                        })
                        .collect(),
                    head: DocHead {
                        weight: s.head.weight.iter().copied().collect(),
                        bias: s.head.bias,
                    },
                })
                .collect(),
        };
        crate::json::to_string(&doc)
    }
}

fn doc_dense(d: &Dense) -> DocDense {
    let (weight, bias) = dense_to_doc(d);
    DocDense { weight, bias }
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    NetworkSpec::from_json_str(&text, &path.display().to_string())
}

pub fn save_network(net: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| NetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(net.to_json_string().as_bytes()).map_err(io)?;
    f.write_all(b"\n").map_err(io)
}

// ---------------------------------------------------------------------------
// Reference networks

/// `F(x) = |x|_1 - c`, one dense layer of six neurons.
pub fn octahedron(c: f64) -> NetworkSpec {
    let rows: [&[f64]; 6] = [
        &[1.0, 0.0, 0.0],
        &[-1.0, 0.0, 0.0],
        &[0.0, 1.0, 0.0],
        &[0.0, -1.0, 0.0],
        &[0.0, 0.0, 1.0],
        &[0.0, 0.0, -1.0],
    ];
    NetworkSpec::single(
        FieldKind::Sdf,
        vec![LayerSpec::Dense(Dense::from_rows(&rows, &[0.0; 6]))],
        Head {
            weight: DVector::from_element(6, 1.0),
            bias: -c,
        },
    )
}

/// `F(x) = max_i (+-x_i) - c` as a max-pool of six one-neuron subnetworks.
///
/// Each neuron is `relu(+-x_i + shift)` with its kink outside `[-shift, shift]^3`,
/// so every subnetwork is affine inside the default box.
pub fn cube_ensemble(c: f64) -> NetworkSpec {
    let shift = 2.0;
    let mut subs = Vec::with_capacity(6);
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let mut row = [0.0; 3];
            row[axis] = sign;
            subs.push(Subnetwork {
                layers: vec![LayerSpec::Dense(Dense::from_rows(&[&row], &[shift]))],
                head: Head {
                    weight: DVector::from_element(1, 1.0),
                    bias: -shift - c,
                },
            });
        }
    }
    NetworkSpec {
        field_kind: FieldKind::Sdf,
        subnetworks: subs,
    }
}

/// The octahedron layer wrapped in a residual-identity block with zero inner weights.
pub fn octahedron_residual(c: f64) -> NetworkSpec {
    let plain = octahedron(c);
    let LayerSpec::Dense(first) = &plain.subnetworks[0].layers[0] else {
        unreachable!()
    };
    let zero = Dense::new(DMatrix::zeros(6, 6), DVector::zeros(6));
    NetworkSpec::single(
        FieldKind::Sdf,
        vec![
            LayerSpec::Dense(first.clone()),
            LayerSpec::ResidualIdentity {
                inner: vec![zero.clone(), zero],
            },
        ],
        plain.subnetworks[0].head.clone(),
    )
}

/// Random dense ReLU network with Gaussian-like weights scaled for unit-range fields.
pub fn random_mlp<R: rand::Rng>(widths: &[usize], rng: &mut R) -> NetworkSpec {
    use rand_distr::{Distribution, StandardNormal};
    let mut layers = Vec::with_capacity(widths.len());
    let mut fan_in = 3;
    for &w in widths {
        let s = (2.0 / fan_in as f64).sqrt();
        let weight = DMatrix::from_fn(w, fan_in, |_, _| {
            let v: f64 = StandardNormal.sample(rng);
            v * s
        });
        let bias = DVector::from_fn(w, |_, _| {
            let v: f64 = StandardNormal.sample(rng);
            0.3 * v
        });
        layers.push(LayerSpec::Dense(Dense::new(weight, bias)));
        fan_in = w;
    }
    let s = (1.0 / fan_in as f64).sqrt();
    let weight = DVector::from_fn(fan_in, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v * s
    });
    let probe = NetworkSpec::single(
        FieldKind::Sdf,
        layers.clone(),
        Head {
            weight: weight.clone(),
            bias: 0.0,
        },
    );
    // Centre the field so the zero set passes near the origin.
    let bias = -probe.forward(&Vec3::zeros()) - 0.25;
    NetworkSpec::single(FieldKind::Sdf, layers, Head { weight, bias })
}
