//! Polygon and triangle meshes: welding, triangulation, topology checks,
//! quadric edge-collapse simplification and OBJ/PLY I/O.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Read as _, Write as _};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::geometry::polygon_vector_area;
use crate::{AffinePlane, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("vertices are affinely dependent")]
    Collinear,
    #[error("simplification ratio {0} is outside (0, 1]")]
    Ratio(f64),
}

pub type Result<T> = std::result::Result<T, MeshError>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolygonMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<Vec<usize>>,
    /// Supporting plane per face; empty when unknown.
    pub planes: Vec<AffinePlane>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl PolygonMesh {
    /// One vertex per polygon corner, no sharing.
    pub fn from_loops<'a>(loops: impl IntoIterator<Item = (&'a [Vec3], Option<AffinePlane>)>) -> Self {
        let mut m = PolygonMesh::default();
        for (vs, plane) in loops {
            let base = m.vertices.len();
            m.vertices.extend_from_slice(vs);
            m.faces.push((base..base + vs.len()).collect());
            if let Some(p) = plane {
                m.planes.push(p);
            }
        }
        if m.planes.len() != m.faces.len() {
            m.planes.clear();
        }
        m
    }

    pub fn area(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| polygon_vector_area(&f.iter().map(|&i| self.vertices[i]).collect::<Vec<_>>()).norm())
            .sum()
    }

    pub fn edge_count(&self) -> usize {
        let mut edges = HashSet::new();
        for f in &self.faces {
            for k in 0..f.len() {
                let (a, b) = (f[k], f[(k + 1) % f.len()]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.len()
    }

    /// Reverses every loop.
    pub fn flip(&mut self) {
        for f in &mut self.faces {
            f.reverse();
        }
        for p in &mut self.planes {
            *p = p.negated();
        }
    }
}

impl TriangleMesh {
    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    pub fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Signed enclosed volume; positive for outward-facing closed meshes.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn to_polygon_mesh(&self) -> PolygonMesh {
        PolygonMesh {
            vertices: self.vertices.clone(),
            faces: self.triangles.iter().map(|t| t.to_vec()).collect(),
            planes: Vec::new(),
        }
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }

    /// Drops unreferenced vertices.
    pub fn compact(&self) -> TriangleMesh {
        let mut map = vec![usize::MAX; self.vertices.len()];
        let mut out = TriangleMesh::default();
        for t in &self.triangles {
            let mut nt = [0; 3];
            for k in 0..3 {
                let v = t[k];
                if map[v] == usize::MAX {
                    map[v] = out.vertices.len();
                    out.vertices.push(self.vertices[v]);
                }
                nt[k] = map[v];
            }
            out.triangles.push(nt);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WeldStats {
    pub merged_vertices: usize,
    pub dropped_faces: usize,
}

/// Merges vertices closer than `tol`; `tol = 0` merges bit-identical ones.
pub fn weld(mesh: &PolygonMesh, tol: f64) -> (PolygonMesh, WeldStats) {
    let mut remap = Vec::with_capacity(mesh.vertices.len());
    let mut reps: Vec<Vec3> = Vec::new();
    if tol <= 0.0 {
        let mut seen: HashMap<[u64; 3], usize> = HashMap::new();
        for v in &mesh.vertices {
            let key = [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
            let id = *seen.entry(key).or_insert_with(|| {
                reps.push(*v);
                reps.len() - 1
            });
            remap.push(id);
        }
    } else {
        let cell = tol;
        let key = |v: &Vec3| -> [i64; 3] { [0, 1, 2].map(|i| (v[i] / cell).floor() as i64) };
        let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for v in &mesh.vertices {
            let k = key(v);
            let mut hit = None;
            'search: for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(ids) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            for &id in ids {
                                if (reps[id] - v).norm() <= tol {
                                    hit = Some(id);
                                    break 'search;
                                }
                            }
                        }
                    }
                }
            }
            let id = hit.unwrap_or_else(|| {
                reps.push(*v);
                grid.entry(k).or_default().push(reps.len() - 1);
                reps.len() - 1
            });
            remap.push(id);
        }
    }
    let mut out = PolygonMesh {
        vertices: reps,
        faces: Vec::with_capacity(mesh.faces.len()),
        planes: Vec::new(),
    };
    let keep_planes = mesh.planes.len() == mesh.faces.len();
    let mut stats = WeldStats {
        merged_vertices: mesh.vertices.len() - out.vertices.len(),
        dropped_faces: 0,
    };
    for (fi, f) in mesh.faces.iter().enumerate() {
        let mut lp: Vec<usize> = Vec::with_capacity(f.len());
        for &v in f {
            let id = remap[v];
            if lp.last() != Some(&id) {
                lp.push(id);
            }
        }
        while lp.len() > 1 && lp.first() == lp.last() {
            lp.pop();
        }
        let distinct: HashSet<usize> = lp.iter().copied().collect();
        if lp.len() < 3 || distinct.len() < 3 {
            stats.dropped_faces += 1;
            continue;
        }
        out.faces.push(lp);
        if keep_planes {
            out.planes.push(mesh.planes[fi]);
        }
    }
    if stats.dropped_faces > 0 {
        log::debug!("weld dropped {} collapsed faces", stats.dropped_faces);
    }
    (out, stats)
}

/// Fans every loop from its first vertex.
pub fn triangulate(mesh: &PolygonMesh) -> TriangleMesh {
    let mut triangles = Vec::with_capacity(mesh.faces.iter().map(|f| f.len().saturating_sub(2)).sum());
    for f in &mesh.faces {
        for k in 1..f.len().saturating_sub(1) {
            triangles.push([f[0], f[k], f[k + 1]]);
        }
    }
    TriangleMesh {
        vertices: mesh.vertices.clone(),
        triangles,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub watertight: bool,
    /// Edges with one incident face.
    pub open_edges: usize,
    /// Edges with more than two incident faces.
    pub nonmanifold_edges: usize,
    pub vertices: usize,
    pub edges: usize,
    pub faces: usize,
    pub euler: i64,
    pub components: usize,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn edge_counts(tris: &[[usize; 3]]) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::with_capacity(tris.len() * 3 / 2);
    for t in tris {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    counts
}

pub fn topology_check(mesh: &TriangleMesh) -> Topology {
    let counts = edge_counts(&mesh.triangles);
    let open = counts.values().filter(|&&c| c == 1).count();
    let nonmanifold = counts.values().filter(|&&c| c > 2).count();
    let mut parent: Vec<usize> = (0..mesh.vertices.len()).collect();
    let mut used = vec![false; mesh.vertices.len()];
    for t in &mesh.triangles {
        for &v in t {
            used[v] = true;
        }
        let r0 = find(&mut parent, t[0]);
        for &v in &t[1..] {
            let r = find(&mut parent, v);
            parent[r] = r0;
        }
    }
    let v = used.iter().filter(|&&u| u).count();
    let mut roots = HashSet::new();
    for (i, &u) in used.iter().enumerate() {
        if u {
            roots.insert(find(&mut parent, i));
        }
    }
    Topology {
        watertight: open == 0 && nonmanifold == 0 && !mesh.triangles.is_empty(),
        open_edges: open,
        nonmanifold_edges: nonmanifold,
        vertices: v,
        edges: counts.len(),
        faces: mesh.triangles.len(),
        euler: v as i64 - counts.len() as i64 + mesh.triangles.len() as i64,
        components: roots.len(),
    }
}

/// Topology of a polygon mesh, counting polygons as faces.
pub fn polygon_topology(mesh: &PolygonMesh) -> Topology {
    let mut t = topology_check(&triangulate(mesh));
    t.faces = mesh.faces.len();
    t.edges = mesh.edge_count();
    t.euler = t.vertices as i64 - t.edges as i64 + t.faces as i64;
    t
}

/// Unit plane through three points, normal `(V V^T)^-1 V 1` with `V = [vi vj vk]`.
pub fn plane_from_vertices(vi: &Vec3, vj: &Vec3, vk: &Vec3) -> Result<AffinePlane> {
    let cross = (vj - vi).cross(&(vk - vi));
    let scale = (vj - vi).norm().max((vk - vi).norm()).max(f64::MIN_POSITIVE);
    if cross.norm() <= 1e-12 * scale * scale {
        return Err(MeshError::Collinear);
    }
    let v = Matrix3::from_columns(&[*vi, *vj, *vk]);
    let vvt = v * v.transpose();
    let vscale = vi.norm().max(vj.norm()).max(vk.norm());
    let normal = match vvt.try_inverse() {
        // The kernel formula needs the plane to miss the origin.
        Some(inv) if v.determinant().abs() > 1e-9 * vscale.powi(3) => inv * v * Vec3::repeat(1.0),
        _ => cross,
    };
    let n = normal.normalize();
    Ok(AffinePlane::new(n, -n.dot(vi)))
}

// ---------------------------------------------------------------------------
// Quadric edge-collapse decimation

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplifyOptions {
    /// Fraction of faces to keep.
    pub ratio: f64,
    /// Largest accepted collapse error as a fraction of the bounding-box diagonal.
    /// Only collapses that would destroy a coarse solid reach the default.
    pub max_error: f64,
}

impl SimplifyOptions {
    pub fn new(ratio: f64) -> Self {
        Self {
            ratio,
            max_error: 0.1,
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    cost: f64,
    pos: Vec3,
    u: usize,
    v: usize,
    stamp_u: u32,
    stamp_v: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Candidate {
    // Min-heap on cost, then on vertex ids for determinism.
    fn cmp(&self, o: &Self) -> Ordering {
        o.cost
            .total_cmp(&self.cost)
            .then(o.u.cmp(&self.u))
            .then(o.v.cmp(&self.v))
    }
}

struct Decimator {
    pos: Vec<Vec3>,
    quad: Vec<Matrix4<f64>>,
    tris: Vec<[usize; 3]>,
    alive: Vec<bool>,
    incident: Vec<Vec<usize>>,
    stamp: Vec<u32>,
    pinned: Vec<bool>,
    dead_vertex: Vec<bool>,
}

impl Decimator {
    fn new(mesh: &TriangleMesh) -> Self {
        let nv = mesh.vertices.len();
        let mut incident = vec![Vec::new(); nv];
        let mut quad = vec![Matrix4::zeros(); nv];
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let [a, b, c] = t.map(|i| mesh.vertices[i]);
            let n = (b - a).cross(&(c - a));
            let k = if n.norm() > 0.0 {
                let n = n.normalize();
                let p = Vector4::new(n.x, n.y, n.z, -n.dot(&a));
                p * p.transpose()
            } else {
                Matrix4::zeros()
            };
            for &v in t {
                incident[v].push(ti);
                quad[v] += k;
            }
        }
        let mut pinned = vec![false; nv];
        for ((a, b), c) in edge_counts(&mesh.triangles) {
            if c != 2 {
                pinned[a] = true;
                pinned[b] = true;
            }
        }
        Self {
            pos: mesh.vertices.clone(),
            quad,
            tris: mesh.triangles.clone(),
            alive: vec![true; mesh.triangles.len()],
            incident,
            stamp: vec![0; nv],
            pinned,
            dead_vertex: vec![false; nv],
        }
    }

    fn neighbors(&self, v: usize) -> HashSet<usize> {
        let mut out = HashSet::new();
        for &t in &self.incident[v] {
            if self.alive[t] {
                out.extend(self.tris[t].iter().copied().filter(|&w| w != v));
            }
        }
        out
    }

    fn candidate(&self, u: usize, v: usize) -> Candidate {
        let q = self.quad[u] + self.quad[v];
        let a = q.fixed_view::<3, 3>(0, 0).into_owned();
        let b = q.fixed_view::<3, 1>(0, 3).into_owned();
        let pos = if a.determinant().abs() >= 1e-10 {
            a.try_inverse().map(|inv| -(inv * b)).unwrap_or((self.pos[u] + self.pos[v]) * 0.5)
        } else {
            (self.pos[u] + self.pos[v]) * 0.5
        };
        let h = Vector4::new(pos.x, pos.y, pos.z, 1.0);
        let cost = (h.transpose() * q * h)[(0, 0)].max(0.0);
        Candidate {
            cost,
            pos,
            u,
            v,
            stamp_u: self.stamp[u],
            stamp_v: self.stamp[v],
        }
    }

    fn allowed(&self, c: &Candidate) -> bool {
        let (u, v) = (c.u, c.v);
        if self.pinned[u] || self.pinned[v] {
            return false;
        }
        let nu = self.neighbors(u);
        let nv = self.neighbors(v);
        let shared: Vec<usize> = self.incident[u]
            .iter()
            .copied()
            .filter(|&t| self.alive[t] && self.tris[t].contains(&v))
            .collect();
        if shared.len() != 2 {
            return false;
        }
        let opposite: HashSet<usize> = shared
            .iter()
            .flat_map(|&t| self.tris[t].iter().copied().filter(|&w| w != u && w != v))
            .collect();
        let common: HashSet<usize> = nu.intersection(&nv).copied().collect();
        if common != opposite {
            return false;
        }
        if opposite.iter().any(|&w| self.neighbors(w).len() <= 3) {
            return false;
        }
        if nu.len() + nv.len() < 4 + 3 {
            return false;
        }
        for &x in [u, v].iter() {
            for &t in &self.incident[x] {
                if !self.alive[t] || shared.contains(&t) {
                    continue;
                }
                let tri = self.tris[t];
                let before = tri.map(|i| self.pos[i]);
                let after = tri.map(|i| if i == u || i == v { c.pos } else { self.pos[i] });
                let n0 = (before[1] - before[0]).cross(&(before[2] - before[0]));
                let n1 = (after[1] - after[0]).cross(&(after[2] - after[0]));
                if n1.norm() <= 1e-14 * n0.norm().max(f64::MIN_POSITIVE) || n0.dot(&n1) <= 0.0 {
                    return false;
                }
            }
        }
        true
    }

    fn collapse(&mut self, c: &Candidate) {
        let (u, v) = (c.u, c.v);
        for &t in &self.incident[v].clone() {
            if !self.alive[t] {
                continue;
            }
            if self.tris[t].contains(&u) {
                self.alive[t] = false;
            } else {
                for i in self.tris[t].iter_mut() {
                    if *i == v {
                        *i = u;
                    }
                }
                self.incident[u].push(t);
            }
        }
        self.incident[v].clear();
        self.dead_vertex[v] = true;
        self.pos[u] = c.pos;
        self.quad[u] = self.quad[u] + self.quad[v];
        self.stamp[u] += 1;
        self.stamp[v] += 1;
        let alive = &self.alive;
        self.incident[u].retain(|&t| alive[t]);
    }
}

/// Garland-Heckbert simplification down to `ratio` of the input faces.
pub fn simplify_qecd(mesh: &TriangleMesh, ratio: f64) -> Result<TriangleMesh> {
    simplify_qecd_with(mesh, &SimplifyOptions::new(ratio))
}

pub fn simplify_qecd_with(mesh: &TriangleMesh, opts: &SimplifyOptions) -> Result<TriangleMesh> {
    let ratio = opts.ratio;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(MeshError::Ratio(ratio));
    }
    if ratio == 1.0 || mesh.triangles.is_empty() {
        return Ok(mesh.clone());
    }
    let target = (ratio * mesh.triangles.len() as f64).ceil() as usize;
    let max_cost = {
        let diag = mesh.bounds().map_or(0.0, |(lo, hi)| (hi - lo).norm());
        (opts.max_error * diag).powi(2)
    };
    let mut d = Decimator::new(mesh);
    let mut heap = BinaryHeap::new();
    for &(a, b) in edge_counts(&mesh.triangles).keys() {
        heap.push(d.candidate(a, b));
    }
    let mut faces = mesh.triangles.len();
    while faces > target {
        let Some(c) = heap.pop() else { break };
        if d.dead_vertex[c.u] || d.dead_vertex[c.v] || c.stamp_u != d.stamp[c.u] || c.stamp_v != d.stamp[c.v] {
            continue;
        }
        if c.cost > max_cost {
            break;
        }
        if !d.allowed(&c) {
            continue;
        }
        d.collapse(&c);
        faces -= 2;
        let u = c.u;
        for w in d.neighbors(u) {
            let (a, b) = (u.min(w), u.max(w));
            heap.push(d.candidate(a, b));
        }
    }
    let out = TriangleMesh {
        vertices: d.pos,
        triangles: d
            .tris
            .iter()
            .zip(&d.alive)
            .filter(|(_, &a)| a)
            .map(|(t, _)| *t)
            .collect(),
    };
    Ok(out.compact())
}

// ---------------------------------------------------------------------------
// File formats

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> MeshError + '_ {
    move |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Shortest round-trip representation; negative zero is written as zero.
fn fmt17(v: f64) -> String {
    format!("{:?}", v + 0.0)
}

pub fn obj_string(mesh: &PolygonMesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 72 + mesh.faces.len() * 24);
    for v in &mesh.vertices {
        s.push_str(&format!("v {} {} {}\n", fmt17(v.x), fmt17(v.y), fmt17(v.z)));
    }
    for f in &mesh.faces {
        s.push('f');
        for &i in f {
            s.push_str(&format!(" {}", i + 1));
        }
        s.push('\n');
    }
    s
}

pub fn write_obj(path: impl AsRef<Path>, mesh: &PolygonMesh) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, obj_string(mesh)).map_err(io_err(path))
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<PolygonMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_obj(&text, &path.display().to_string())
}

pub fn parse_obj(text: &str, origin: &str) -> Result<PolygonMesh> {
    let mut mesh = PolygonMesh::default();
    let err = |line: usize, message: String| MeshError::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| err(ln, format!("bad coordinate `{t}`: {e}"))))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(err(ln, "vertex needs three coordinates".into()));
                }
                mesh.vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut face = Vec::new();
                for t in it {
                    let idx = t.split('/').next().unwrap_or("");
                    let i: i64 = idx.parse().map_err(|e| err(ln, format!("bad index `{t}`: {e}")))?;
                    let n = mesh.vertices.len() as i64;
                    let i = if i < 0 { n + i } else { i - 1 };
                    if i < 0 || i >= n {
                        return Err(err(ln, format!("index `{t}` out of range")));
                    }
                    face.push(i as usize);
                }
                if face.len() < 3 {
                    return Err(err(ln, "face needs at least three vertices".into()));
                }
                mesh.faces.push(face);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

pub const PLY_HEADER_FIELDS: [&str; 9] = [
    "ply",
    "format binary_little_endian 1.0",
    "element vertex",
    "property double x",
    "property double y",
    "property double z",
    "element face",
    "property list uchar int vertex_indices",
    "end_header",
];

pub fn write_ply(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment exactmesh\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    let e = io_err(path);
    w.write_all(header.as_bytes()).map_err(&e)?;
    for v in &mesh.vertices {
        for c in [v.x, v.y, v.z] {
            w.write_all(&c.to_le_bytes()).map_err(&e)?;
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8]).map_err(&e)?;
        for &i in t {
            w.write_all(&(i as i32).to_le_bytes()).map_err(&e)?;
        }
    }
    w.flush().map_err(&e)
}

/// Reads the binary PLY layout written by [`write_ply`].
pub fn read_ply(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let origin = path.display().to_string();
    let perr = |line: usize, message: &str| MeshError::Parse {
        path: origin.clone(),
        line,
        message: message.to_string(),
    };
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| perr(0, "missing end_header"))?
        + 11;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| perr(0, "header is not UTF-8"))?;
    let (mut nv, mut nf) = (None, None);
    for (ln, line) in header.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => return Err(perr(ln + 1, "unsupported format")),
            ["element", "vertex", n] => nv = n.parse::<usize>().ok(),
            ["element", "face", n] => nf = n.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (nv, nf) = (nv.ok_or_else(|| perr(0, "missing vertex count"))?, nf.ok_or_else(|| perr(0, "missing face count"))?);
    let mut at = end;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| perr(0, "truncated body"))?;
        at += n;
        Ok(s)
    };
    let mut mesh = TriangleMesh::default();
    for _ in 0..nv {
        let mut c = [0.0; 3];
        for x in &mut c {
            *x = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        mesh.vertices.push(Vec3::from(c));
    }
    for _ in 0..nf {
        if take(1)?[0] != 3 {
            return Err(perr(0, "only triangles are supported"));
        }
        let mut t = [0usize; 3];
        for x in &mut t {
            *x = i32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        }
        mesh.triangles.push(t);
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn octahedron_mesh() -> TriangleMesh {
        let v = vec![
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::new(-0.5, 0.0, 0.0),
            Vec3::new(0.0, 0.5, 0.0),
            Vec3::new(0.0, -0.5, 0.0),
            Vec3::new(0.0, 0.0, 0.5),
            Vec3::new(0.0, 0.0, -0.5),
        ];
        let mut triangles = Vec::new();
        for &(x, y, z) in &[
            (0, 2, 4),
            (2, 1, 4),
            (1, 3, 4),
            (3, 0, 4),
            (2, 0, 5),
            (1, 2, 5),
            (3, 1, 5),
            (0, 3, 5),
        ] {
            triangles.push([x, y, z]);
        }
        TriangleMesh { vertices: v, triangles }
    }

    #[test]
    fn octahedron_topology() {
        let m = octahedron_mesh();
        let t = topology_check(&m);
        assert!(t.watertight);
        assert_eq!((t.vertices, t.edges, t.faces, t.euler, t.components), (6, 12, 8, 2, 1));
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn missing_face_opens_three_edges() {
        let mut m = octahedron_mesh();
        m.triangles.pop();
        let t = topology_check(&m);
        assert!(!t.watertight);
        assert_eq!(t.open_edges, 3);
    }

    #[test]
    fn two_octahedra() {
        let a = octahedron_mesh();
        let mut m = a.clone();
        let off = m.vertices.len();
        m.vertices.extend(a.vertices.iter().map(|v| v + Vec3::new(3.0, 0.0, 0.0)));
        m.triangles.extend(a.triangles.iter().map(|t| t.map(|i| i + off)));
        let t = topology_check(&m);
        assert_eq!((t.components, t.euler), (2, 4));
    }

    #[test]
    fn fan_counts() {
        let pent: Vec<Vec3> = (0..5)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 5.0;
                Vec3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        let m = PolygonMesh::from_loops([(pent.as_slice(), None)]);
        let t = triangulate(&m);
        assert_eq!(t.triangles.len(), 3);
        assert!((t.area() - m.area()).abs() <= 1e-12 * m.area());
        let tri = PolygonMesh::from_loops([(&pent[..3], None)]);
        assert_eq!(triangulate(&tri).triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn plane_through_unit_points() {
        let p = plane_from_vertices(&Vec3::x(), &Vec3::y(), &Vec3::z()).unwrap();
        let s = 1.0 / 3f64.sqrt();
        assert!((p.normal - Vec3::repeat(s)).norm() < 1e-15);
        assert!((p.offset + s).abs() < 1e-15);
        let c = plane_from_vertices(&Vec3::zeros(), &Vec3::x(), &(Vec3::x() * 2.0));
        assert!(matches!(c, Err(MeshError::Collinear)));
    }

    #[test]
    fn plane_through_origin_uses_cross_product() {
        let p = plane_from_vertices(&Vec3::zeros(), &Vec3::x(), &Vec3::y()).unwrap();
        assert!((p.normal - Vec3::z()).norm() < 1e-15);
        assert_eq!(p.offset, 0.0);
    }

    #[test]
    fn weld_zero_tol_is_identity_on_welded() {
        let m = octahedron_mesh().to_polygon_mesh();
        let (w, s) = weld(&m, 0.0);
        assert_eq!(w, m);
        assert_eq!(s, WeldStats::default());
    }

    #[test]
    fn octahedron_resists_simplification() {
        let m = octahedron_mesh();
        assert_eq!(simplify_qecd(&m, 1.0).unwrap(), m);
        let s = simplify_qecd(&m, 0.5).unwrap();
        assert_eq!(s.triangles.len(), 8);
        assert!(simplify_qecd(&m, 0.0).is_err());
        assert!(simplify_qecd(&m, 1.5).is_err());
    }

    #[test]
    fn obj_round_trip() {
        let m = octahedron_mesh().to_polygon_mesh();
        let text = obj_string(&m);
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 6);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 8);
        assert_eq!(parse_obj(&text, "mem").unwrap(), m);
    }

    #[test]
    fn obj_rejects_bad_index() {
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n", "mem").is_err());
    }
}
