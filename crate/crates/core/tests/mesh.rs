mod common;

use common::{point_in, random_net, rng};
use exactmesh::baseline::{marching_cubes, AnalyticShape};
use exactmesh::march::{march, MarchConfig};
use exactmesh::mesh::{
    obj_string, parse_obj, plane_from_vertices, read_obj, read_ply, simplify_qecd, topology_check, triangulate, weld,
    write_obj, write_ply,
};
use exactmesh::{Aabb, AffinePlane, PolygonMesh, Vec3};
use proptest::prelude::*;

fn marched(seed: u64) -> Option<PolygonMesh> {
    march(&random_net(seed), &MarchConfig { seeds: 16, ..MarchConfig::default() })
        .ok()
        .map(|m| m.polygon_mesh(1e-7).0)
}

fn same_plane_up_to_sign(a: &AffinePlane, b: &AffinePlane) -> bool {
    let (a, b) = (a.normalized().unwrap(), b.normalized().unwrap());
    let close = |p: &AffinePlane, q: &AffinePlane| (p.normal - q.normal).norm() < 1e-9 && (p.offset - q.offset).abs() < 1e-9;
    close(&a, &b) || close(&a, &b.negated())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn triangulation_preserves_area(seed in 0u64..10_000) {
        let Some(mesh) = marched(seed) else { return Ok(()) };
        let a = mesh.area();
        prop_assert!((triangulate(&mesh).area() - a).abs() <= 1e-9 * a.max(1e-300));
    }

    #[test]
    fn weld_is_idempotent(seed in 0u64..10_000, tol in 1e-9f64..1e-3) {
        let Some(mesh) = marched(seed) else { return Ok(()) };
        let (once, _) = weld(&mesh, tol);
        let (twice, stats) = weld(&once, tol);
        prop_assert_eq!(stats.merged_vertices, 0);
        prop_assert_eq!(stats.dropped_faces, 0);
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn simplification_does_not_open_edges(seed in 0u64..10_000, ratio in 0.05f64..1.0) {
        let Some(mesh) = marched(seed) else { return Ok(()) };
        let tri = triangulate(&mesh);
        let before = topology_check(&tri).open_edges;
        let out = simplify_qecd(&tri, ratio).unwrap();
        prop_assert!(topology_check(&out).open_edges <= before);
        prop_assert!(out.triangles.len() <= tri.triangles.len());
    }

    #[test]
    fn plane_through_points_ignores_cyclic_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let [a, b, c] = [0; 3].map(|_| point_in(&mut r, 1.0));
        prop_assume!((b - a).cross(&(c - a)).norm() > 1e-6);
        let p = plane_from_vertices(&a, &b, &c).unwrap();
        for q in [plane_from_vertices(&b, &c, &a).unwrap(), plane_from_vertices(&c, &a, &b).unwrap()] {
            prop_assert!(same_plane_up_to_sign(&p, &q));
        }
        for v in [a, b, c] {
            prop_assert!(p.eval(&v).abs() <= 1e-12 * (1.0 + p.normal.norm()));
        }
    }

    #[test]
    fn obj_text_round_trips_exactly(seed in 0u64..10_000) {
        let Some(mesh) = marched(seed) else { return Ok(()) };
        let back = parse_obj(&obj_string(&mesh), "memory").unwrap();
        prop_assert_eq!(back.vertices, mesh.vertices);
        prop_assert_eq!(back.faces, mesh.faces);
    }
}

#[test]
fn simplified_sphere_stays_closed() {
    let tri = marching_cubes(&AnalyticShape::Sphere { r: 0.5 }, 48, &Aabb::default());
    assert!(topology_check(&tri).watertight);
    let out = simplify_qecd(&tri, 0.1).unwrap();
    let topo = topology_check(&out);
    assert!(topo.watertight, "{topo:?}");
    assert_eq!(topo.euler, 2);
    let target = (tri.triangles.len() as f64 * 0.1).ceil() as usize;
    let n = out.triangles.len() as f64;
    assert!((n - target as f64).abs() <= 0.1 * target as f64, "{n} faces for target {target}");
    assert!(out.signed_volume() > 0.9 * tri.signed_volume());
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let tri = marching_cubes(&AnalyticShape::Torus { major: 0.5, minor: 0.2 }, 24, &Aabb::default());
    let ply = dir.path().join("t.ply");
    write_ply(&ply, &tri).unwrap();
    let back = read_ply(&ply).unwrap();
    assert_eq!(back.vertices, tri.vertices);
    assert_eq!(back.triangles, tri.triangles);
    let obj = dir.path().join("t.obj");
    let poly = tri.to_polygon_mesh();
    write_obj(&obj, &poly).unwrap();
    let back = read_obj(&obj).unwrap();
    assert_eq!(back.vertices, poly.vertices);
    assert_eq!(back.faces, poly.faces);
}

#[test]
fn reading_missing_file_is_an_error() {
    let err = read_obj("/nonexistent/mesh.obj").unwrap_err();
    assert!(err.to_string().contains("/nonexistent/mesh.obj"));
    let v = Vec3::zeros();
    assert!(plane_from_vertices(&v, &v, &v).is_err());
}
