//! Surface metrics: Chamfer distance, F-score and volumetric IoU.

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::shapes::AnalyticShape;
use crate::mesh::TriangleMesh;
use crate::net::NetworkSpec;
use crate::trigger::seed_rng;
use crate::{Aabb, Vec3};

pub const DEFAULT_SAMPLES: usize = 100_000;
pub const DEFAULT_TAU: f64 = 5e-3;

/// Source of area-uniform surface samples.
pub trait SurfaceSampler: Sync {
    fn sample_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3>;
}

impl SurfaceSampler for TriangleMesh {
    fn sample_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in &self.triangles {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        if acc <= 0.0 {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let r = rng.random::<f64>() * acc;
                let ti = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
                let [a, b, c] = self.triangles[ti].map(|i| self.vertices[i]);
                let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }
}

impl SurfaceSampler for AnalyticShape {
    fn sample_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n).map(|_| self.sample_point(rng)).collect()
    }
}

/// Distances from every point of `from` to its nearest neighbour in `to`.
pub fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    if to.is_empty() {
        return vec![f64::INFINITY; from.len()];
    }
    let pts: Vec<[f64; 3]> = to.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, u32, 3, 32> = ImmutableKdTree::new_from_slice(&pts);
    from.par_iter()
        .map(|p| tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]).distance.sqrt())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    /// Mean of both directed mean nearest distances, times 1e3.
    pub chamfer: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

/// Chamfer distance and F-score from one pair of sample sets.
pub fn surface_metrics(a: &dyn SurfaceSampler, b: &dyn SurfaceSampler, n: usize, tau: f64, rng_seed: u64) -> SurfaceMetrics {
    let pa = a.sample_surface(n, &mut seed_rng(rng_seed, 0));
    let pb = b.sample_surface(n, &mut seed_rng(rng_seed, 0));
    let dab = nearest_distances(&pa, &pb);
    let dba = nearest_distances(&pb, &pa);
    let mean = |d: &[f64]| if d.is_empty() { f64::INFINITY } else { d.iter().sum::<f64>() / d.len() as f64 };
    let frac = |d: &[f64]| if d.is_empty() { 0.0 } else { d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64 };
    let (precision, recall) = (frac(&dab), frac(&dba));
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    SurfaceMetrics {
        chamfer: 0.5 * (mean(&dab) + mean(&dba)) * 1e3,
        precision,
        recall,
        fscore,
    }
}

pub fn chamfer(a: &dyn SurfaceSampler, b: &dyn SurfaceSampler, n: usize, rng_seed: u64) -> f64 {
    surface_metrics(a, b, n, DEFAULT_TAU, rng_seed).chamfer
}

pub fn fscore(a: &dyn SurfaceSampler, b: &dyn SurfaceSampler, tau: f64, n: usize, rng_seed: u64) -> f64 {
    surface_metrics(a, b, n, tau, rng_seed).fscore
}

/// Closest point to `p` on triangle `abc`.
pub fn closest_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = va + vb + vc;
    if denom.abs() < f64::MIN_POSITIVE {
        // Degenerate triangle: fall back to its edges.
        return [(a, b), (b, c), (c, a)]
            .iter()
            .map(|(u, v)| closest_on_segment(p, u, v))
            .min_by(|x, y| (x - p).norm_squared().total_cmp(&(y - p).norm_squared()))
            .unwrap();
    }
    a + ab * (vb / denom) + ac * (vc / denom)
}

fn closest_on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let d = b - a;
    let l = d.norm_squared();
    if l == 0.0 {
        return *a;
    }
    a + d * ((p - a).dot(&d) / l).clamp(0.0, 1.0)
}

/// Exact distance from every point to the surface of `mesh`.
///
/// Candidate triangles come from a radius query on centroids around the nearest one.
pub fn mesh_distances(from: &[Vec3], mesh: &TriangleMesh) -> Vec<f64> {
    if mesh.triangles.is_empty() {
        return vec![f64::INFINITY; from.len()];
    }
    let corners: Vec<[Vec3; 3]> = mesh.triangles.iter().map(|t| t.map(|i| mesh.vertices[i])).collect();
    let centroids: Vec<[f64; 3]> = corners
        .iter()
        .map(|[a, b, c]| {
            let m = (a + b + c) / 3.0;
            [m.x, m.y, m.z]
        })
        .collect();
    let reach = corners
        .iter()
        .zip(&centroids)
        .map(|(t, m)| t.iter().map(|v| (v - Vec3::from(*m)).norm()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let tree: ImmutableKdTree<f64, u32, 3, 32> = ImmutableKdTree::new_from_slice(&centroids);
    let dist = |p: &Vec3, i: usize| {
        let [a, b, c] = &corners[i];
        (closest_on_triangle(p, a, b, c) - p).norm()
    };
    from.par_iter()
        .map(|p| {
            let q = [p.x, p.y, p.z];
            let first = tree.nearest_one::<SquaredEuclidean>(&q).item as usize;
            let upper = dist(p, first);
            let r = upper + reach;
            tree.within_unsorted::<SquaredEuclidean>(&q, r * r)
                .iter()
                .map(|nb| dist(p, nb.item as usize))
                .fold(upper, f64::min)
        })
        .collect()
}

/// Chamfer distance (times 1e3) using exact point-to-surface distances from samples.
///
/// Unlike [`chamfer`] it has no sampling floor: identical surfaces score zero.
pub fn chamfer_to_mesh(a: &TriangleMesh, b: &TriangleMesh, n: usize, rng_seed: u64) -> f64 {
    let pa = a.sample_surface(n, &mut seed_rng(rng_seed, 0));
    let pb = b.sample_surface(n, &mut seed_rng(rng_seed, 1));
    let mean = |d: Vec<f64>| if d.is_empty() { f64::INFINITY } else { d.iter().sum::<f64>() / d.len() as f64 };
    0.5 * (mean(mesh_distances(&pa, b)) + mean(mesh_distances(&pb, a))) * 1e3
}

/// Inside/outside classification on a regular grid of cell centres.
pub trait Occupancy: Sync {
    /// Row-major `[i][j][k]` flags for `res^3` cell centres of `bbox`.
    fn occupancy_grid(&self, res: usize, bbox: &Aabb) -> Vec<bool>;
}

fn cell_centre(bbox: &Aabb, res: usize, i: usize, j: usize, k: usize) -> Vec3 {
    let e = bbox.extent();
    let lo = bbox.lo();
    Vec3::new(
        lo.x + (i as f64 + 0.5) * e.x / res as f64,
        lo.y + (j as f64 + 0.5) * e.y / res as f64,
        lo.z + (k as f64 + 0.5) * e.z / res as f64,
    )
}

fn grid_by<F: Fn(&Vec3) -> bool + Sync>(res: usize, bbox: &Aabb, inside: F) -> Vec<bool> {
    (0..res * res * res)
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx / (res * res), (idx / res) % res, idx % res);
            inside(&cell_centre(bbox, res, i, j, k))
        })
        .collect()
}

impl Occupancy for NetworkSpec {
    fn occupancy_grid(&self, res: usize, bbox: &Aabb) -> Vec<bool> {
        grid_by(res, bbox, |x| self.is_inside(x))
    }
}

impl Occupancy for AnalyticShape {
    fn occupancy_grid(&self, res: usize, bbox: &Aabb) -> Vec<bool> {
        grid_by(res, bbox, |x| self.sdf(x) < 0.0)
    }
}

impl Occupancy for TriangleMesh {
    /// Parity of crossings along a slightly jittered +x ray per grid row.
    fn occupancy_grid(&self, res: usize, bbox: &Aabb) -> Vec<bool> {
        let e = bbox.extent();
        let lo = bbox.lo();
        let (hy, hz) = (e.y / res as f64, e.z / res as f64);
        let (jy, jz) = (hy * 7.316_2e-6, hz * 3.981_7e-6);
        // Bucket triangles by the rows their yz-projection covers.
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); res * res];
        for (ti, t) in self.triangles.iter().enumerate() {
            let [a, b, c] = t.map(|i| self.vertices[i]);
            let (ymin, ymax) = (a.y.min(b.y).min(c.y), a.y.max(b.y).max(c.y));
            let (zmin, zmax) = (a.z.min(b.z).min(c.z), a.z.max(b.z).max(c.z));
            let j0 = (((ymin - lo.y) / hy - 0.5).floor().max(0.0)) as usize;
            let j1 = (((ymax - lo.y) / hy - 0.5).ceil().max(0.0) as usize).min(res - 1);
            let k0 = (((zmin - lo.z) / hz - 0.5).floor().max(0.0)) as usize;
            let k1 = (((zmax - lo.z) / hz - 0.5).ceil().max(0.0) as usize).min(res - 1);
            for j in j0..=j1.max(j0).min(res - 1) {
                for k in k0..=k1.max(k0).min(res - 1) {
                    rows[j * res + k].push(ti);
                }
            }
        }
        let per_row: Vec<Vec<bool>> = (0..res * res)
            .into_par_iter()
            .map(|row| {
                let (j, k) = (row / res, row % res);
                let y = lo.y + (j as f64 + 0.5) * hy + jy;
                let z = lo.z + (k as f64 + 0.5) * hz + jz;
                let mut hits: Vec<f64> = rows[row]
                    .iter()
                    .filter_map(|&ti| {
                        let [a, b, c] = self.triangles[ti].map(|i| self.vertices[i]);
                        ray_x_hit(&a, &b, &c, y, z)
                    })
                    .collect();
                hits.sort_by(f64::total_cmp);
                (0..res)
                    .map(|i| {
                        let x = lo.x + (i as f64 + 0.5) * e.x / res as f64;
                        hits.partition_point(|&h| h < x) % 2 == 1
                    })
                    .collect()
            })
            .collect();
        let mut out = vec![false; res * res * res];
        for (row, flags) in per_row.iter().enumerate() {
            let (j, k) = (row / res, row % res);
            for (i, &f) in flags.iter().enumerate() {
                out[(i * res + j) * res + k] = f;
            }
        }
        out
    }
}

/// x coordinate where the line `(t, y, z)` meets triangle `abc`.
fn ray_x_hit(a: &Vec3, b: &Vec3, c: &Vec3, y: f64, z: f64) -> Option<f64> {
    let det = (b.y - a.y) * (c.z - a.z) - (c.y - a.y) * (b.z - a.z);
    if det == 0.0 {
        return None;
    }
    let u = ((y - a.y) * (c.z - a.z) - (c.y - a.y) * (z - a.z)) / det;
    let v = ((b.y - a.y) * (z - a.z) - (y - a.y) * (b.z - a.z)) / det;
    if u < 0.0 || v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(a.x + (b.x - a.x) * u + (c.x - a.x) * v)
}

/// Intersection over union of two occupancy grids; 1 when both are empty.
pub fn iou(a: &dyn Occupancy, b: &dyn Occupancy, res: usize, bbox: &Aabb) -> f64 {
    let ga = a.occupancy_grid(res, bbox);
    let gb = b.occupancy_grid(res, bbox);
    let (mut inter, mut uni) = (0usize, 0usize);
    for (x, y) in ga.iter().zip(&gb) {
        inter += (*x && *y) as usize;
        uni += (*x || *y) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}
