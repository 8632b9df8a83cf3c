//! Marching-cubes baseline, analytic ground-truth shapes and surface metrics.

mod mc;
mod mc_tables;
pub mod metrics;
mod shapes;

pub use mc::{marching_cubes, Dense, ScalarField};
pub use metrics::{
    chamfer, chamfer_to_mesh, fscore, iou, mesh_distances, surface_metrics, Occupancy, SurfaceMetrics, SurfaceSampler,
};
pub use shapes::AnalyticShape;
