//! Analytic marching: breadth-first traversal of the linear regions crossed
//! by the zero level set, one face polygon per region.

use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::geometry::{cell_from_maps, extract_face_naive, pivot_walk, AnalyticCell, FacePolygon, PlaneSource};
use crate::mesh::{weld, PolygonMesh, WeldStats};
use crate::net::{check_unique_planes, NetError, NetworkSpec, StateVector};
use crate::trigger::{sample_seeds, validate_scheme, TriggerError, TriggerScheme};
use crate::{Aabb, FieldKind, Tolerances, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceMode {
    #[default]
    Pivot,
    Naive,
}

impl std::str::FromStr for FaceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pivot" => Ok(Self::Pivot),
            "naive" => Ok(Self::Naive),
            _ => Err(format!("unknown face mode `{s}` (expected pivot or naive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarchConfig {
    pub bbox: Aabb,
    pub tol: Tolerances,
    pub seeds: usize,
    pub trigger: TriggerScheme,
    pub threads: usize,
    pub face_mode: FaceMode,
    pub max_cells: usize,
    pub rng_seed: u64,
}

impl Default for MarchConfig {
    fn default() -> Self {
        Self {
            bbox: Aabb::default(),
            tol: Tolerances::default(),
            seeds: 64,
            trigger: TriggerScheme::Dichotomy,
            threads: 1,
            face_mode: FaceMode::Pivot,
            max_cells: 10_000_000,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MarchReport {
    pub cells_visited: usize,
    pub faces_emitted: usize,
    pub empty_faces: usize,
    /// Face edges lying on the working box.
    pub open_edges: usize,
    pub seconds: f64,
    pub unique_plane_violations: usize,
    pub seeds: usize,
    pub pivot_fallbacks: usize,
    pub capped: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum MarchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone)]
pub struct Marched {
    /// Faces sorted by state.
    pub faces: Vec<FacePolygon>,
    pub report: MarchReport,
    pub field_kind: FieldKind,
}

impl Marched {
    /// Welded mesh with loops facing out of the solid.
    pub fn polygon_mesh(&self, tol_weld: f64) -> (PolygonMesh, WeldStats) {
        let raw = PolygonMesh::from_loops(self.faces.iter().map(|f| (f.vertices.as_slice(), Some(f.plane))));
        let (mut mesh, stats) = weld(&raw, tol_weld);
        if self.field_kind == FieldKind::Occupancy {
            mesh.flip();
        }
        (mesh, stats)
    }
}

/// Flips neuron `k`, or moves the ensemble to branch `i`.
pub fn neighbor_state(s: &StateVector, via: PlaneSource) -> Result<StateVector, MarchError> {
    match via {
        PlaneSource::Neuron(k) if k < s.len() => {
            let mut n = s.clone();
            n.flip(k);
            Ok(n)
        }
        PlaneSource::Neuron(k) => Err(MarchError::Config(format!("neuron {k} out of range"))),
        PlaneSource::Branch(i) if s.branch.is_some() => Ok(s.clone().with_branch(Some(i))),
        PlaneSource::Branch(_) => Err(MarchError::Config("branch switch on a non-ensemble state".into())),
        PlaneSource::BoxFace(_) => Err(MarchError::Config("no neighbor beyond the working box".into())),
    }
}

struct Item {
    state: StateVector,
    /// Point on the shared edge and the edge direction.
    entry: Option<(Vec3, Vec3)>,
}

struct Queue {
    items: VecDeque<Item>,
    in_flight: usize,
}

struct Engine<'a> {
    net: &'a NetworkSpec,
    cfg: &'a MarchConfig,
    visited: Mutex<HashSet<StateVector>>,
    queue: Mutex<Queue>,
    cv: Condvar,
    capped: AtomicBool,
    empty: AtomicUsize,
    open_edges: AtomicUsize,
    fallbacks: AtomicUsize,
    expanded: AtomicUsize,
    faces: Mutex<Vec<FacePolygon>>,
}

/// Generic directions for resolving seeds that sit on a region boundary.
const SEED_DIRS: [[f64; 3]; 3] = [
    [0.536_721_3, 0.811_231_9, 0.232_183_7],
    [-0.704_311_2, 0.301_554_8, 0.642_691_5],
    [0.465_088_1, -0.500_121_4, 0.730_391_2],
];

impl<'a> Engine<'a> {
    /// Claims `state`; false if already visited or the cap is reached.
    fn claim(&self, state: &StateVector) -> bool {
        let mut v = self.visited.lock().unwrap();
        if v.contains(state) {
            return false;
        }
        if v.len() >= self.cfg.max_cells {
            self.capped.store(true, Ordering::Relaxed);
            return false;
        }
        v.insert(state.clone());
        true
    }

    fn cell(&self, state: &StateVector) -> AnalyticCell {
        let maps = self.net.affine_maps(state).expect("state length checked at claim");
        cell_from_maps(state.clone(), &maps, &self.cfg.bbox, self.cfg.tol)
    }

    fn face(&self, cell: &AnalyticCell, entry: Option<(Vec3, Vec3)>) -> Option<FacePolygon> {
        if self.cfg.face_mode == FaceMode::Naive {
            return extract_face_naive(cell);
        }
        let Some((m, e)) = entry else {
            return extract_face_naive(cell);
        };
        let face = cell.unit_face()?;
        let start = cell.constraints.iter().position(|c| {
            let line = face.normal.cross(&c.plane.normal);
            c.plane.eval(&m).abs() <= self.cfg.tol.onplane && line.cross(&e).norm() <= 1e-9 * line.norm() * e.norm()
        });
        let Some(start) = start else {
            self.fallbacks.fetch_add(1, Ordering::Relaxed);
            log::debug!("no entry plane in state {}, using naive extraction", cell.state);
            return extract_face_naive(cell);
        };
        match pivot_walk(cell, start, &m) {
            Ok(f) => f,
            Err(err) => {
                self.fallbacks.fetch_add(1, Ordering::Relaxed);
                log::debug!("pivot walk failed ({err:?}) in state {}, using naive extraction", cell.state);
                extract_face_naive(cell)
            }
        }
    }

    /// States across each non-box edge of `face`.
    fn neighbors(&self, cell: &AnalyticCell, face: &FacePolygon) -> Vec<Item> {
        let Some(fu) = cell.unit_face() else { return Vec::new() };
        let tol = self.cfg.tol;
        let nv = face.vertices.len();
        let mut out = Vec::new();
        for i in 0..nv {
            let (a, b) = (face.vertices[i], face.vertices[(i + 1) % nv]);
            let e = b - a;
            let m = (a + b) * 0.5;
            let tight: Vec<usize> = (0..cell.constraints.len())
                .filter(|&k| cell.constraints[k].plane.eval(&m).abs() <= tol.onplane)
                .collect();
            if tight.iter().any(|&k| cell.constraints[k].source.is_box()) || face.edge_sources[i].is_box() {
                self.open_edges.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            let eu = e.normalize();
            let d = eu.cross(&fu.normal).normalize();
            let (s, _) = self.net.directional_state(&m, &[d, fu.normal, eu], tol.onplane);
            out.push(Item {
                state: s,
                entry: Some((m, e)),
            });
            // Classes of distinct planes through the edge.
            let mut classes: Vec<usize> = Vec::new();
            for &k in &tight {
                let nk = cell.constraints[k].plane.normal;
                if !classes.iter().any(|&c| cell.constraints[c].plane.normal.dot(&nk) > 1.0 - 1e-9) {
                    classes.push(k);
                }
            }
            if classes.len() >= 2 {
                for &c in &classes {
                    let nc = cell.constraints[c].plane.normal;
                    let mut t = nc.cross(&eu);
                    if t.norm() == 0.0 {
                        continue;
                    }
                    t = t.normalize();
                    let side: f64 = classes
                        .iter()
                        .filter(|&&o| o != c)
                        .map(|&o| cell.constraints[o].plane.normal.dot(&t))
                        .sum();
                    if side > 0.0 {
                        t = -t;
                    }
                    let (s, _) = self.net.directional_state(&m, &[t, nc, eu], tol.onplane);
                    out.push(Item {
                        state: s,
                        entry: Some((m, e)),
                    });
                }
            }
        }
        out
    }

    fn process(&self, item: Item) -> Vec<Item> {
        self.expanded.fetch_add(1, Ordering::Relaxed);
        let cell = self.cell(&item.state);
        let Some(face) = self.face(&cell, item.entry) else {
            self.empty.fetch_add(1, Ordering::Relaxed);
            return Vec::new();
        };
        let next: Vec<Item> = self
            .neighbors(&cell, &face)
            .into_iter()
            .filter(|it| it.state != item.state && self.claim(&it.state))
            .collect();
        self.faces.lock().unwrap().push(face);
        next
    }

    fn worker(&self) {
        loop {
            let item = {
                let mut q = self.queue.lock().unwrap();
                loop {
                    if let Some(it) = q.items.pop_front() {
                        q.in_flight += 1;
                        break Some(it);
                    }
                    if q.in_flight == 0 {
                        break None;
                    }
                    q = self.cv.wait(q).unwrap();
                }
            };
            let Some(item) = item else {
                self.cv.notify_all();
                return;
            };
            let next = self.process(item);
            let mut q = self.queue.lock().unwrap();
            q.items.extend(next);
            q.in_flight -= 1;
            drop(q);
            self.cv.notify_all();
        }
    }
}

/// Seeds the traversal and meshes every reachable cell.
pub fn march(net: &NetworkSpec, cfg: &MarchConfig) -> Result<Marched, MarchError> {
    let t0 = Instant::now();
    if cfg.max_cells == 0 {
        return Err(MarchError::Config("max_cells must be at least 1".into()));
    }
    if cfg.threads == 0 {
        return Err(MarchError::Config("thread count must be at least 1".into()));
    }
    if !cfg.bbox.is_valid() {
        return Err(MarchError::Config("bounding box must have positive finite extent".into()));
    }
    net.validate()?;
    validate_scheme(net, cfg.trigger)?;
    let seeds = sample_seeds(net, cfg.seeds, &cfg.bbox, cfg.trigger, cfg.rng_seed)?;
    let dirs: Vec<Vec3> = SEED_DIRS.iter().map(|d| Vec3::from(*d)).collect();
    let engine = Engine {
        net,
        cfg,
        visited: Mutex::new(HashSet::new()),
        queue: Mutex::new(Queue {
            items: VecDeque::new(),
            in_flight: 0,
        }),
        cv: Condvar::new(),
        capped: AtomicBool::new(false),
        empty: AtomicUsize::new(0),
        open_edges: AtomicUsize::new(0),
        fallbacks: AtomicUsize::new(0),
        expanded: AtomicUsize::new(0),
        faces: Mutex::new(Vec::new()),
    };
    let mut seed_states = 0;
    {
        let mut q = engine.queue.lock().unwrap();
        for x in &seeds {
            let (s, _) = net.directional_state(x, &dirs, cfg.tol.onplane);
            if engine.claim(&s) {
                seed_states += 1;
                q.items.push_back(Item { state: s, entry: None });
            }
        }
    }
    if cfg.threads == 1 {
        engine.worker();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..cfg.threads {
                scope.spawn(|| engine.worker());
            }
        });
    }
    let mut faces = engine.faces.into_inner().unwrap();
    faces.sort_by(|a, b| a.state.cmp(&b.state));
    let planes: Vec<(StateVector, crate::AffinePlane)> = faces.iter().map(|f| (f.state.clone(), f.plane)).collect();
    let violations = check_unique_planes(&planes, 1e-9).len();
    let capped = engine.capped.load(Ordering::Relaxed);
    if capped {
        log::warn!("max_cells = {} reached; mesh is partial", cfg.max_cells);
    }
    let report = MarchReport {
        cells_visited: engine.expanded.load(Ordering::Relaxed),
        faces_emitted: faces.len(),
        empty_faces: engine.empty.load(Ordering::Relaxed),
        open_edges: engine.open_edges.load(Ordering::Relaxed),
        seconds: t0.elapsed().as_secs_f64(),
        unique_plane_violations: violations,
        seeds: seed_states,
        pivot_fallbacks: engine.fallbacks.load(Ordering::Relaxed),
        capped,
    };
    Ok(Marched {
        faces,
        report,
        field_kind: net.field_kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_involution() {
        let s = StateVector::from_bits(&[true, false, false, true, true, false]);
        let n = neighbor_state(&s, PlaneSource::Neuron(2)).unwrap();
        assert_eq!(n, StateVector::from_bits(&[true, false, true, true, true, false]));
        assert_eq!(neighbor_state(&n, PlaneSource::Neuron(2)).unwrap(), s);
        assert!(neighbor_state(&s, PlaneSource::BoxFace(0)).is_err());
    }
}
