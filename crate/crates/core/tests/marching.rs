mod common;

use std::collections::HashSet;

use common::random_net;
use exactmesh::geometry::{build_cell, extract_face_naive, point_in_cell};
use exactmesh::march::{march, FaceMode, MarchConfig, MarchError, Marched};
use exactmesh::mesh::{polygon_topology, weld};
use exactmesh::net::{cube_ensemble, octahedron, state_space_size, Dense, LayerSpec, NetworkSpec};
use exactmesh::trigger::TriggerError;
use exactmesh::{FacePolygon, Vec3};
use num_bigint::BigUint;
use proptest::prelude::*;

const TOL_WELD: f64 = 1e-7;

fn march_or_skip(net: &NetworkSpec, cfg: &MarchConfig) -> Option<Marched> {
    match march(net, cfg) {
        Ok(m) => Some(m),
        Err(MarchError::Trigger(TriggerError::NoSurface)) => None,
        Err(e) => panic!("march failed: {e}"),
    }
}

/// Loops as sets of vertex keys rounded to the weld tolerance, with the state.
fn face_keys(faces: &[FacePolygon]) -> Vec<(String, Vec<[i64; 3]>)> {
    let mut out: Vec<_> = faces
        .iter()
        .map(|f| {
            let mut vs: Vec<[i64; 3]> = f
                .vertices
                .iter()
                .map(|v| [0, 1, 2].map(|i| (v[i] / TOL_WELD).round() as i64))
                .collect();
            vs.sort();
            (format!("{:?}", f.state), vs)
        })
        .collect();
    out.sort();
    out
}

fn same_vertex_set(a: &[Vec3], b: &[Vec3]) -> bool {
    a.len() == b.len()
        && a.iter().all(|p| b.iter().any(|q| (p - q).norm() <= TOL_WELD))
        && b.iter().all(|p| a.iter().any(|q| (p - q).norm() <= TOL_WELD))
}

fn loop_area_along(f: &FacePolygon) -> f64 {
    let n = f.plane.normal.normalize();
    let c = f.vertices[0];
    (1..f.vertices.len() - 1)
        .map(|i| (f.vertices[i] - c).cross(&(f.vertices[i + 1] - c)).dot(&n))
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn faces_satisfy_cell_invariants(seed in 0u64..10_000) {
        let net = random_net(seed);
        let cfg = MarchConfig { seeds: 16, ..MarchConfig::default() };
        let Some(m) = march_or_skip(&net, &cfg) else { return Ok(()) };
        prop_assert_eq!(m.report.pivot_fallbacks, 0);
        for f in &m.faces {
            let cell = build_cell(&net, &f.state, &cfg.bbox).unwrap();
            let naive = extract_face_naive(&cell).expect("naive face missing");
            prop_assert!(same_vertex_set(&f.vertices, &naive.vertices), "pivot/naive mismatch in {:?}", f.state);
            let scale = f.plane.normal.norm();
            for v in &f.vertices {
                prop_assert!(f.plane.eval(v).abs() <= 1e-9 * scale.max(1.0));
                prop_assert!(point_in_cell(&cell, v, 1e-9));
                // Dropped degenerate planes must not cut the vertex off.
                for p in &cell.neuron_planes {
                    prop_assert!(p.eval(v) <= 1e-9 * (1.0 + p.normal.norm()));
                }
            }
            prop_assert!(loop_area_along(f) > 0.0, "clockwise loop in {:?}", f.state);
        }
    }

    #[test]
    fn traversal_is_thread_independent(seed in 0u64..10_000, threads in 2usize..9) {
        let net = random_net(seed);
        let cfg = MarchConfig { seeds: 16, ..MarchConfig::default() };
        let Some(a) = march_or_skip(&net, &cfg) else { return Ok(()) };
        let b = march(&net, &MarchConfig { threads, ..cfg }).unwrap();
        prop_assert_eq!(face_keys(&a.faces), face_keys(&b.faces));
        prop_assert_eq!(a.report.cells_visited, b.report.cells_visited);
    }

    #[test]
    fn states_are_visited_once(seed in 0u64..10_000) {
        let net = random_net(seed);
        let cfg = MarchConfig { seeds: 16, ..MarchConfig::default() };
        let Some(m) = march_or_skip(&net, &cfg) else { return Ok(()) };
        let states: HashSet<_> = m.faces.iter().map(|f| f.state.clone()).collect();
        prop_assert_eq!(states.len(), m.faces.len());
        prop_assert!(m.faces.len() <= m.report.cells_visited);
        prop_assert!(BigUint::from(m.report.cells_visited) <= state_space_size(net.neuron_count()) * BigUint::from(net.subnetworks.len()));
    }

    #[test]
    fn closed_when_no_box_edges(seed in 0u64..10_000) {
        let net = random_net(seed);
        let Some(m) = march_or_skip(&net, &MarchConfig::default()) else { return Ok(()) };
        let (mesh, _) = m.polygon_mesh(TOL_WELD);
        let topo = polygon_topology(&mesh);
        if m.report.open_edges == 0 {
            prop_assert!(topo.watertight, "{:?}", topo);
        }
        prop_assert_eq!(topo.nonmanifold_edges, 0);
    }

    #[test]
    fn vertices_are_exact(seed in 0u64..10_000) {
        let net = random_net(seed);
        let Some(m) = march_or_skip(&net, &MarchConfig::default()) else { return Ok(()) };
        let (mesh, _) = m.polygon_mesh(TOL_WELD);
        for v in &mesh.vertices {
            prop_assert!(net.forward(v).abs() <= 1e-6);
        }
    }
}

#[test]
fn pivot_and_naive_modes_agree_on_fixtures() {
    for net in [octahedron(0.5), cube_ensemble(0.5), octahedron(0.3)] {
        let a = march(&net, &MarchConfig::default()).unwrap();
        let b = march(&net, &MarchConfig { face_mode: FaceMode::Naive, ..MarchConfig::default() }).unwrap();
        assert_eq!(face_keys(&a.faces), face_keys(&b.faces));
    }
}

/// Octahedron plus a zero-weight neuron whose plane `z = 0.5 - d` clips the apex,
/// leaving face edges shorter than the weld tolerance.
fn clipped_octahedron(d: f64) -> NetworkSpec {
    let mut net = octahedron(0.5);
    let sub = &mut net.subnetworks[0];
    let LayerSpec::Dense(layer) = &sub.layers[0] else { unreachable!() };
    let mut rows: Vec<Vec<f64>> = (0..6).map(|i| layer.weight.row(i).iter().copied().collect()).collect();
    rows.push(vec![0.0, 0.0, 1.0]);
    let rows: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    sub.layers[0] = LayerSpec::Dense(Dense::from_rows(&rows, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.5 + d]));
    sub.head.weight = sub.head.weight.clone().insert_row(6, 0.0);
    net
}

#[test]
fn pivot_walks_past_sub_weld_edges() {
    for d in [3e-8, 5e-8, 9e-8] {
        let net = clipped_octahedron(d);
        let a = march(&net, &MarchConfig::default()).unwrap();
        let b = march(&net, &MarchConfig { face_mode: FaceMode::Naive, ..MarchConfig::default() }).unwrap();
        assert_eq!(a.report.pivot_fallbacks, 0, "d = {d}");
        assert_eq!(face_keys(&a.faces), face_keys(&b.faces), "d = {d}");
    }
}

#[test]
fn weld_is_idempotent_on_marched_mesh() {
    let m = march(&cube_ensemble(0.5), &MarchConfig::default()).unwrap();
    let (once, _) = m.polygon_mesh(TOL_WELD);
    let (twice, stats) = weld(&once, TOL_WELD);
    assert_eq!(stats.merged_vertices, 0);
    assert_eq!(twice.vertices, once.vertices);
    assert_eq!(twice.faces, once.faces);
}

#[test]
fn occupancy_net_meshes_outward() {
    let occ = octahedron(0.5).to_occupancy(10.0).unwrap();
    let m = march(&occ, &MarchConfig::default()).unwrap();
    let (mesh, _) = m.polygon_mesh(TOL_WELD);
    let tri = exactmesh::mesh::triangulate(&mesh);
    assert!(tri.signed_volume() > 0.0);
    let sdf = march(&octahedron(0.5), &MarchConfig::default()).unwrap();
    let (mesh2, _) = sdf.polygon_mesh(TOL_WELD);
    assert!((exactmesh::mesh::triangulate(&mesh2).signed_volume() - tri.signed_volume()).abs() < 1e-12);
}
