//! Analytic cells and faces: the convex region of one activation state and
//! the polygon cut from it by the region's face plane.

use crate::net::{NetError, NetworkSpec, RegionMaps, StateVector};
use crate::{Aabb, AffinePlane, Tolerances, Vec3};

/// Origin of a cell constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlaneSource {
    /// Hidden neuron, by state index.
    Neuron(usize),
    /// Dominance of the selected branch over subnetwork `i`.
    Branch(usize),
    /// Face of the working box, ordered -x, +x, -y, +y, -z, +z.
    BoxFace(usize),
}

impl PlaneSource {
    pub fn is_box(&self) -> bool {
        matches!(self, PlaneSource::BoxFace(_))
    }
}

/// Oriented unit-normal half-space `plane(x) <= 0`.
#[derive(Debug, Clone, Copy)]
pub struct Constraint {
    pub plane: AffinePlane,
    pub source: PlaneSource,
}

#[derive(Debug, Clone)]
pub struct AnalyticCell {
    pub state: StateVector,
    /// `(1 - 2 s_k)(a_k . x + b_k)`, one per hidden neuron, unnormalized.
    pub neuron_planes: Vec<AffinePlane>,
    /// `F_i - F_j` per non-selected branch `i`.
    pub branch_planes: Vec<(usize, AffinePlane)>,
    pub bbox_planes: [AffinePlane; 6],
    pub face_plane: AffinePlane,
    /// Non-degenerate constraints with unit normals, in source order.
    pub constraints: Vec<Constraint>,
    /// A degenerate plane has a violated constant term: the cell is empty.
    pub infeasible: bool,
    pub tol: Tolerances,
}

/// Ordered vertex loop of an analytic face.
#[derive(Debug, Clone, PartialEq)]
pub struct FacePolygon {
    /// Counter-clockwise seen from the side where F increases.
    pub vertices: Vec<Vec3>,
    pub plane: AffinePlane,
    pub state: StateVector,
    /// Boundary plane carrying edge `i -> i+1`.
    pub edge_sources: Vec<PlaneSource>,
}

impl FacePolygon {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn area(&self) -> f64 {
        polygon_vector_area(&self.vertices).norm()
    }
}

/// Twice-halved vector area of a planar loop.
pub(crate) fn polygon_vector_area(v: &[Vec3]) -> Vec3 {
    let mut a = Vec3::zeros();
    if v.len() < 3 {
        return a;
    }
    for i in 1..v.len() - 1 {
        a += (v[i] - v[0]).cross(&(v[i + 1] - v[0]));
    }
    a * 0.5
}

const DEGENERATE_NORM: f64 = 1e-13;

pub fn build_cell(net: &NetworkSpec, state: &StateVector, bbox: &Aabb) -> Result<AnalyticCell, NetError> {
    let maps = net.affine_maps(state)?;
    Ok(cell_from_maps(state.clone(), &maps, bbox, Tolerances::default()))
}

pub fn cell_from_maps(state: StateVector, maps: &RegionMaps, bbox: &Aabb, tol: Tolerances) -> AnalyticCell {
    let mut constraints = Vec::with_capacity(maps.neuron_planes.len() + maps.branch_planes.len() + 6);
    let mut infeasible = false;
    let mut push = |p: AffinePlane, source: PlaneSource, constraints: &mut Vec<Constraint>| {
        let n = p.normal.norm();
        if n <= DEGENERATE_NORM {
            if p.offset > 1e-12 {
                infeasible = true;
            }
        } else {
            constraints.push(Constraint {
                plane: p.scaled(1.0 / n),
                source,
            });
        }
    };
    let neuron_planes: Vec<AffinePlane> = maps
        .neuron_planes
        .iter()
        .enumerate()
        .map(|(k, p)| if state.get(k) { p.negated() } else { *p })
        .collect();
    for (k, p) in neuron_planes.iter().enumerate() {
        push(*p, PlaneSource::Neuron(k), &mut constraints);
    }
    for &(i, p) in &maps.branch_planes {
        push(p, PlaneSource::Branch(i), &mut constraints);
    }
    let bbox_planes = bbox.planes();
    for (i, p) in bbox_planes.iter().enumerate() {
        push(*p, PlaneSource::BoxFace(i), &mut constraints);
    }
    AnalyticCell {
        state,
        neuron_planes,
        branch_planes: maps.branch_planes.clone(),
        bbox_planes,
        face_plane: maps.face_plane,
        constraints,
        infeasible,
        tol,
    }
}

/// Intersection point of three planes, `None` when nearly singular.
pub fn solve_three_planes(p1: &AffinePlane, p2: &AffinePlane, p3: &AffinePlane, tol_det: f64) -> Option<Vec3> {
    let c23 = p2.normal.cross(&p3.normal);
    let det = p1.normal.dot(&c23);
    let scale = p1.normal.norm() * p2.normal.norm() * p3.normal.norm();
    // Written so that a NaN determinant also counts as singular.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(det.abs() >= tol_det * scale) || scale == 0.0 {
        return None;
    }
    let c31 = p3.normal.cross(&p1.normal);
    let c12 = p1.normal.cross(&p2.normal);
    Some(-(c23 * p1.offset + c31 * p2.offset + c12 * p3.offset) / det)
}

pub fn point_in_cell(cell: &AnalyticCell, x: &Vec3, tol: f64) -> bool {
    !cell.infeasible && cell.constraints.iter().all(|c| c.plane.eval(x) <= tol)
}

impl AnalyticCell {
    /// Face plane with unit normal, `None` when F is constant on the region.
    pub fn unit_face(&self) -> Option<AffinePlane> {
        let n = self.face_plane.normal.norm();
        (n > DEGENERATE_NORM).then(|| self.face_plane.scaled(1.0 / n))
    }

    fn vertex(&self, face: &AffinePlane, i: usize, j: usize) -> Option<Vec3> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        solve_three_planes(&self.constraints[a].plane, &self.constraints[b].plane, face, self.tol.det)
    }

    fn tight(&self, x: &Vec3) -> Vec<usize> {
        (0..self.constraints.len())
            .filter(|&k| self.constraints[k].plane.eval(x).abs() <= self.tol.onplane)
            .collect()
    }

    /// Constraint index with the given source.
    pub fn constraint_index(&self, source: PlaneSource) -> Option<usize> {
        self.constraints.iter().position(|c| c.source == source)
    }

    /// Constraint tight at `x` whose unit normal is closest to `normal`.
    pub fn find_crossing(&self, x: &Vec3, normal: &Vec3) -> Option<usize> {
        let n = normal.normalize();
        self.tight(x)
            .into_iter()
            .map(|k| (k, self.constraints[k].plane.normal.dot(&n)))
            .filter(|&(_, d)| d > 1.0 - 1e-9)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
    }
}

/// All-pairs face extraction.
pub fn extract_face_naive(cell: &AnalyticCell) -> Option<FacePolygon> {
    if cell.infeasible {
        return None;
    }
    let face = cell.unit_face()?;
    let n = cell.constraints.len();
    let mut pts: Vec<Vec3> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let Some(v) = cell.vertex(&face, i, j) else { continue };
            if point_in_cell(cell, &v, cell.tol.cell) && !pts.iter().any(|p| (p - v).norm() <= cell.tol.weld) {
                pts.push(v);
            }
        }
    }
    if pts.len() < 3 {
        return None;
    }
    let c = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let u = any_perpendicular(&face.normal);
    let w = face.normal.cross(&u);
    let mut keyed: Vec<(f64, Vec3)> = pts
        .into_iter()
        .map(|p| {
            let d = p - c;
            (d.dot(&w).atan2(d.dot(&u)), p)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    finish(cell, &face, keyed.into_iter().map(|(_, p)| p).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PivotError {
    /// No valid vertex on the plane the walk stands on.
    DeadEnd,
    /// The walk did not return to its starting plane.
    NoClosure,
}

/// Extraction by walking the polygon boundary from a known boundary plane.
///
/// `start` indexes `cell.constraints`; `start_point` lies on the face plane
/// inside the cell. Falls back to [`extract_face_naive`] when the walk fails.
pub fn extract_face_pivot(cell: &AnalyticCell, start: usize, start_point: &Vec3) -> Option<FacePolygon> {
    match pivot_walk(cell, start, start_point) {
        Ok(face) => face,
        Err(e) => {
            log::debug!("pivot walk failed ({e:?}) for state {}, using naive extraction", cell.state);
            extract_face_naive(cell)
        }
    }
}

pub fn pivot_walk(cell: &AnalyticCell, start: usize, start_point: &Vec3) -> Result<Option<FacePolygon>, PivotError> {
    if cell.infeasible {
        return Ok(None);
    }
    let Some(face) = cell.unit_face() else { return Ok(None) };
    let n = cell.constraints.len();
    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|k| (cell.constraints[k].plane.eval(start_point).abs(), k))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = order.into_iter().map(|(_, k)| k).collect();
    let valid = |x: &Vec3| point_in_cell(cell, x, cell.tol.cell);

    // First vertex on the starting plane.
    let mut first = None;
    for &c in &order {
        if c == start {
            continue;
        }
        if let Some(v) = cell.vertex(&face, start, c) {
            if valid(&v) {
                first = Some((v, c));
                break;
            }
        }
    }
    let Some((v1, c1)) = first else { return Err(PivotError::DeadEnd) };
    let mut verts = vec![v1];
    let mut cur = next_plane(cell, &face, &v1, start, c1);
    if cur == start {
        return Err(PivotError::DeadEnd);
    }
    let mut prev = start;
    for _ in 0..n + 2 {
        let last = *verts.last().unwrap();
        let (mut found, mut welded) = (None, None);
        for &c in &order {
            if c == cur || c == prev {
                continue;
            }
            let Some(v) = cell.vertex(&face, cur, c) else { continue };
            if !valid(&v) {
                continue;
            }
            if (v - last).norm() <= cell.tol.weld {
                welded = welded.or(Some((v, c)));
                continue;
            }
            found = Some((v, c));
            break;
        }
        let Some((v, c)) = found else {
            // The edge along `cur` is shorter than the weld tolerance: turn
            // at `last` without emitting a vertex.
            let Some((w, c)) = welded else { return Err(PivotError::DeadEnd) };
            let nxt = next_plane(cell, &face, &w, cur, c);
            if nxt == start {
                return Ok(finish(cell, &face, verts));
            }
            prev = cur;
            cur = nxt;
            continue;
        };
        if (v - v1).norm() <= cell.tol.weld {
            return Ok(finish(cell, &face, verts));
        }
        verts.push(v);
        let nxt = next_plane(cell, &face, &v, cur, c);
        if nxt == start || cell.constraints[nxt].plane.eval(&v1).abs() <= cell.tol.onplane && on_same_line(cell, &face, nxt, start) {
            return Ok(finish(cell, &face, verts));
        }
        prev = cur;
        cur = nxt;
    }
    Err(PivotError::NoClosure)
}

fn on_same_line(cell: &AnalyticCell, face: &AffinePlane, a: usize, b: usize) -> bool {
    let da = face.normal.cross(&cell.constraints[a].plane.normal);
    let db = face.normal.cross(&cell.constraints[b].plane.normal);
    da.cross(&db).norm() <= 1e-9 * da.norm() * db.norm()
}

/// Plane carrying the outgoing edge at vertex `v` reached along `cur`.
///
/// Several planes may pass through `v`; the outgoing edge runs along the one
/// whose in-face direction leaves `cur` while staying feasible for every plane
/// tight at `v`. Falls back to `hit`, the plane that produced `v`.
fn next_plane(cell: &AnalyticCell, face: &AffinePlane, v: &Vec3, cur: usize, hit: usize) -> usize {
    let tight = cell.tight(v);
    let n_cur = cell.constraints[cur].plane.normal;
    for &k in &tight {
        if k == cur || on_same_line(cell, face, k, cur) {
            continue;
        }
        let mut d = face.normal.cross(&cell.constraints[k].plane.normal);
        let len = d.norm();
        if len == 0.0 {
            continue;
        }
        d /= len;
        let lead = n_cur.dot(&d);
        if lead.abs() <= 1e-12 {
            continue;
        }
        if lead > 0.0 {
            d = -d;
        }
        if tight.iter().all(|&j| j == k || cell.constraints[j].plane.normal.dot(&d) <= 1e-10) {
            return k;
        }
    }
    hit
}

/// Canonicalizes vertices, removes duplicates, orients counter-clockwise
/// around the face normal and fills in edge sources.
fn finish(cell: &AnalyticCell, face: &AffinePlane, loop_: Vec<Vec3>) -> Option<FacePolygon> {
    let mut verts: Vec<Vec3> = Vec::with_capacity(loop_.len());
    for v in loop_ {
        let v = canonical_vertex(cell, face, &v);
        if !verts.iter().any(|p| (p - v).norm() <= cell.tol.weld) {
            verts.push(v);
        }
    }
    if verts.len() < 3 {
        return None;
    }
    let area = polygon_vector_area(&verts);
    let a = area.dot(&face.normal);
    if a == 0.0 {
        return None;
    }
    if a < 0.0 {
        verts.reverse();
    }
    // Start at the lexicographically smallest vertex.
    let start = (0..verts.len())
        .min_by(|&i, &j| {
            let (p, q) = (verts[i], verts[j]);
            p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)).then(p.z.total_cmp(&q.z))
        })
        .unwrap();
    verts.rotate_left(start);
    let tight: Vec<Vec<usize>> = verts.iter().map(|v| cell.tight(v)).collect();
    let m = verts.len();
    let edge_sources = (0..m)
        .map(|i| {
            let j = (i + 1) % m;
            let common = tight[i].iter().find(|k| tight[j].contains(k)).copied();
            let k = common.unwrap_or_else(|| {
                (0..cell.constraints.len())
                    .min_by(|&a, &b| {
                        let ea = edge_residual(cell, a, &verts[i], &verts[j]);
                        let eb = edge_residual(cell, b, &verts[i], &verts[j]);
                        ea.total_cmp(&eb)
                    })
                    .unwrap()
            });
            cell.constraints[k].source
        })
        .collect();
    Some(FacePolygon {
        vertices: verts,
        plane: cell.face_plane,
        state: cell.state.clone(),
        edge_sources,
    })
}

fn edge_residual(cell: &AnalyticCell, k: usize, a: &Vec3, b: &Vec3) -> f64 {
    let p = &cell.constraints[k].plane;
    p.eval(a).abs().max(p.eval(b).abs())
}

/// Re-solves a vertex from its best-conditioned pair of tight planes so the
/// result does not depend on the pair that discovered it.
fn canonical_vertex(cell: &AnalyticCell, face: &AffinePlane, v: &Vec3) -> Vec3 {
    let tight = cell.tight(v);
    let mut best: Option<(f64, usize, usize)> = None;
    for (a, &i) in tight.iter().enumerate() {
        for &j in &tight[a + 1..] {
            let det = cell.constraints[i]
                .plane
                .normal
                .dot(&cell.constraints[j].plane.normal.cross(&face.normal))
                .abs();
            if best.is_none_or(|(d, _, _)| det > d) {
                best = Some((det, i, j));
            }
        }
    }
    best.and_then(|(_, i, j)| cell.vertex(face, i, j)).unwrap_or(*v)
}

pub(crate) fn any_perpendicular(n: &Vec3) -> Vec3 {
    let a = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vec3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    n.cross(&a).normalize()
}
