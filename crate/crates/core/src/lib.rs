//! Exact zero-level-set meshing of ReLU implicit surface networks.
//!
//! A ReLU network is piecewise affine. Every linear region whose affine map
//! crosses zero contributes one convex polygon to the surface; [`march`]
//! walks these regions from seed points and assembles the polygons into a
//! mesh. The crate also provides the marching-cubes baseline, metrics, mesh
//! simplification and a small trainer used to produce test networks.

pub mod baseline;
pub mod geometry;
pub mod json;
pub mod march;
pub mod mesh;
pub mod net;
pub mod train;
pub mod trigger;

pub use geometry::{AnalyticCell, FacePolygon, PlaneSource};
pub use march::{march, MarchConfig, MarchReport, Marched};
pub use mesh::{PolygonMesh, TriangleMesh};
pub use net::{AffinePlane, FieldKind, NetworkSpec, StateVector};

use serde::{Deserialize, Serialize};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Axis-aligned working box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Aabb {
    fn default() -> Self {
        Self::cube(1.2)
    }
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self {
            min: [min.x, min.y, min.z],
            max: [max.x, max.y, max.z],
        }
    }

    /// `[-h, h]^3`.
    pub fn cube(h: f64) -> Self {
        Self {
            min: [-h; 3],
            max: [h; 3],
        }
    }

    pub fn lo(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn hi(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.hi() - self.lo()
    }

    pub fn center(&self) -> Vec3 {
        (self.hi() + self.lo()) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, x: &Vec3, tol: f64) -> bool {
        (0..3).all(|i| x[i] >= self.min[i] - tol && x[i] <= self.max[i] + tol)
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i])
    }

    /// Outward half-spaces `n . x + b <= 0`, ordered -x, +x, -y, +y, -z, +z.
    pub fn planes(&self) -> [AffinePlane; 6] {
        let mut out = [AffinePlane::new(Vec3::zeros(), 0.0); 6];
        for axis in 0..3 {
            let mut n = Vec3::zeros();
            n[axis] = -1.0;
            out[2 * axis] = AffinePlane::new(n, self.min[axis]);
            n[axis] = 1.0;
            out[2 * axis + 1] = AffinePlane::new(n, -self.max[axis]);
        }
        out
    }

    /// Point from unit-cube coordinates.
    pub fn lerp(&self, t: &Vec3) -> Vec3 {
        let lo = self.lo();
        lo + self.extent().component_mul(t)
    }
}

/// Numerical tolerances shared by cell construction, face extraction and welding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub det: f64,
    pub cell: f64,
    pub onplane: f64,
    pub weld: f64,
    pub seed: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            det: 1e-12,
            cell: 1e-9,
            onplane: 1e-9,
            weld: 1e-7,
            seed: 1e-7,
        }
    }
}
