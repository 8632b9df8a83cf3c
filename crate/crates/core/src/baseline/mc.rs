//! Marching cubes on a regular sample grid.
//!
//! The grid is traversed as an octree of cell blocks; a block whose field
//! bounds keep one sign is skipped, and the remaining leaf blocks are
//! processed densely. Vertices are keyed by global grid edge so the output
//! is identical to a dense sweep.

use std::collections::HashMap;

use rayon::prelude::*;

use super::mc_tables::TRIANGLE_TABLE;
use super::shapes::AnalyticShape;
use crate::mesh::{weld, TriangleMesh};
use crate::net::NetworkSpec;
use crate::{Aabb, FieldKind, Vec3};

/// Scalar field whose zero set is meshed; positive outside.
pub trait ScalarField: Sync {
    fn value(&self, x: &Vec3) -> f64;

    fn values(&self, xs: &[Vec3]) -> Vec<f64> {
        xs.iter().map(|x| self.value(x)).collect()
    }

    /// Conservative range of the field over a box, if available.
    fn bounds(&self, _lo: &Vec3, _hi: &Vec3) -> Option<(f64, f64)> {
        None
    }
}

impl ScalarField for NetworkSpec {
    fn value(&self, x: &Vec3) -> f64 {
        match self.field_kind {
            FieldKind::Sdf => self.forward(x),
            FieldKind::Occupancy => -self.forward(x),
        }
    }

    fn values(&self, xs: &[Vec3]) -> Vec<f64> {
        let mut v = self.forward_batch(xs);
        if self.field_kind == FieldKind::Occupancy {
            v.iter_mut().for_each(|f| *f = -*f);
        }
        v
    }

    fn bounds(&self, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
        let (a, b) = self.interval(lo, hi);
        Some(match self.field_kind {
            FieldKind::Sdf => (a, b),
            FieldKind::Occupancy => (-b, -a),
        })
    }
}

impl ScalarField for AnalyticShape {
    fn value(&self, x: &Vec3) -> f64 {
        self.sdf(x)
    }

    fn bounds(&self, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
        let c = (lo + hi) * 0.5;
        let r = (hi - lo).norm() * 0.5 * (1.0 + 1e-9);
        let v = self.sdf(&c);
        Some((v - r, v + r))
    }
}

/// Disables block pruning, for cross-checks.
pub struct Dense<'a, F: ?Sized>(pub &'a F);

impl<F: ScalarField + ?Sized> ScalarField for Dense<'_, F> {
    fn value(&self, x: &Vec3) -> f64 {
        self.0.value(x)
    }

    fn values(&self, xs: &[Vec3]) -> Vec<f64> {
        self.0.values(xs)
    }
}

const LEAF: usize = 8;

/// Corner offsets in table order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

struct Grid {
    n: usize,
    bbox: Aabb,
}

impl Grid {
    fn coord(&self, axis: usize, i: usize) -> f64 {
        let t = i as f64 / (self.n - 1) as f64;
        self.bbox.min[axis] + (self.bbox.max[axis] - self.bbox.min[axis]) * t
    }

    fn point(&self, i: [usize; 3]) -> Vec3 {
        Vec3::new(self.coord(0, i[0]), self.coord(1, i[1]), self.coord(2, i[2]))
    }

    fn edge_key(&self, a: [usize; 3], b: [usize; 3]) -> u64 {
        let lo = [a[0].min(b[0]), a[1].min(b[1]), a[2].min(b[2])];
        let axis = (0..3).find(|&k| a[k] != b[k]).unwrap();
        let n = self.n as u64;
        ((lo[0] as u64 * n + lo[1] as u64) * n + lo[2] as u64) * 3 + axis as u64
    }
}

#[derive(Clone, Copy)]
struct Block {
    lo: [usize; 3],
    hi: [usize; 3],
}

fn collect_blocks<F: ScalarField + ?Sized>(field: &F, grid: &Grid, b: Block, out: &mut Vec<Block>) {
    if let Some((lo, hi)) = field.bounds(&grid.point(b.lo), &grid.point(b.hi)) {
        // Margin for rounding in the bound computation.
        let m = 1e-10 * (1.0 + lo.abs() + hi.abs());
        if lo > m || hi < -m {
            return;
        }
    }
    let size: Vec<usize> = (0..3).map(|k| b.hi[k] - b.lo[k]).collect();
    if size.iter().all(|&s| s <= LEAF) {
        out.push(b);
        return;
    }
    let axis = (0..3).max_by_key(|&k| (size[k], 3 - k)).unwrap();
    let mid = b.lo[axis] + size[axis] / 2;
    let mut left = b;
    left.hi[axis] = mid;
    let mut right = b;
    right.lo[axis] = mid;
    collect_blocks(field, grid, left, out);
    collect_blocks(field, grid, right, out);
}

struct LeafOutput {
    verts: Vec<(u64, Vec3)>,
    tris: Vec<[u64; 3]>,
}

fn process_block<F: ScalarField + ?Sized>(field: &F, grid: &Grid, b: Block) -> LeafOutput {
    let dims = [b.hi[0] - b.lo[0] + 1, b.hi[1] - b.lo[1] + 1, b.hi[2] - b.lo[2] + 1];
    let idx = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
    let mut pts = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                pts.push(grid.point([b.lo[0] + i, b.lo[1] + j, b.lo[2] + k]));
            }
        }
    }
    let vals = field.values(&pts);
    let mut out = LeafOutput {
        verts: Vec::new(),
        tris: Vec::new(),
    };
    for i in 0..dims[0] - 1 {
        for j in 0..dims[1] - 1 {
            for k in 0..dims[2] - 1 {
                let mut case = 0usize;
                let mut cv = [0.0; 8];
                for (c, off) in CORNERS.iter().enumerate() {
                    cv[c] = vals[idx(i + off[0], j + off[1], k + off[2])];
                    if cv[c] < 0.0 {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLE_TABLE[case];
                let mut keys = [0u64; 12];
                let mut done = [false; 12];
                let corner = |c: usize| [b.lo[0] + i + CORNERS[c][0], b.lo[1] + j + CORNERS[c][1], b.lo[2] + k + CORNERS[c][2]];
                let mut t = 0;
                while t < 16 && row[t] >= 0 {
                    let mut tri = [0u64; 3];
                    for s in 0..3 {
                        let e = row[t + s] as usize;
                        if !done[e] {
                            let [c0, c1] = EDGES[e];
                            let (ga, gb) = (corner(c0), corner(c1));
                            keys[e] = grid.edge_key(ga, gb);
                            // Interpolate from the lower grid corner for a key-unique position.
                            let (pa, pb, va, vb) = if ga <= gb {
                                (grid.point(ga), grid.point(gb), cv[c0], cv[c1])
                            } else {
                                (grid.point(gb), grid.point(ga), cv[c1], cv[c0])
                            };
                            let tt = va / (va - vb);
                            out.verts.push((keys[e], pa + (pb - pa) * tt));
                            done[e] = true;
                        }
                        tri[s] = keys[e];
                    }
                    // Table winding is clockwise seen from outside.
                    out.tris.push([tri[0], tri[2], tri[1]]);
                    t += 3;
                }
            }
        }
    }
    out
}

/// Triangle mesh of the zero set sampled at `resolution` points per axis.
pub fn marching_cubes<F: ScalarField + ?Sized>(field: &F, resolution: usize, bbox: &Aabb) -> TriangleMesh {
    assert!(resolution >= 2, "resolution must be at least 2");
    let grid = Grid { n: resolution, bbox: *bbox };
    let mut blocks = Vec::new();
    let top = resolution - 1;
    collect_blocks(
        field,
        &grid,
        Block {
            lo: [0; 3],
            hi: [top; 3],
        },
        &mut blocks,
    );
    let leaves: Vec<LeafOutput> = blocks.par_iter().map(|b| process_block(field, &grid, *b)).collect();
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut mesh = TriangleMesh::default();
    for leaf in &leaves {
        for (key, p) in &leaf.verts {
            index.entry(*key).or_insert_with(|| {
                mesh.vertices.push(*p);
                mesh.vertices.len() - 1
            });
        }
    }
    for leaf in &leaves {
        for t in &leaf.tris {
            mesh.triangles.push(t.map(|k| index[&k]));
        }
    }
    // Corner samples exactly at zero produce coincident vertices.
    let (welded, _) = weld(&mesh.to_polygon_mesh(), 0.0);
    TriangleMesh {
        vertices: welded.vertices,
        triangles: welded.faces.iter().map(|f| [f[0], f[1], f[2]]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::topology_check;
    use crate::net::octahedron;

    #[test]
    fn sphere_is_closed_and_outward() {
        let s = AnalyticShape::Sphere { r: 0.5 };
        let m = marching_cubes(&s, 24, &Aabb::default());
        let t = topology_check(&m);
        assert!(t.watertight);
        assert_eq!(t.euler, 2);
        let v = m.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!((v - exact).abs() < 0.05 * exact, "{v}");
    }

    #[test]
    fn pruned_equals_dense() {
        let net = octahedron(0.5);
        let a = marching_cubes(&net, 33, &Aabb::default());
        let b = marching_cubes(&Dense(&net), 33, &Aabb::default());
        assert_eq!(a, b);
        assert!(!a.triangles.is_empty());
    }

    #[test]
    fn empty_field_gives_empty_mesh() {
        let mut net = octahedron(0.5);
        net.subnetworks[0].head.bias = 10.0;
        let m = marching_cubes(&net, 16, &Aabb::default());
        assert!(m.triangles.is_empty());
    }
}
