mod common;

use common::random_net;
use exactmesh::march::{march, MarchConfig, MarchError};
use exactmesh::net::octahedron;
use exactmesh::trigger::{
    find_seed, sample_seeds, seed_dichotomy, seed_sphere_trace, validate_scheme, TriggerError, TriggerScheme, SEED_TOL,
};
use exactmesh::{Aabb, Vec3};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn seeds_are_on_the_surface(seed in 0u64..10_000, index in 0u64..64) {
        let net = random_net(seed);
        for scheme in [TriggerScheme::Dichotomy, TriggerScheme::Sgd, TriggerScheme::SphereTrace] {
            if let Some(s) = find_seed(&net, &Aabb::default(), scheme, 7, index) {
                prop_assert!(net.forward(&s.point).abs() <= SEED_TOL.max(1e-9), "{scheme}: {}", net.forward(&s.point));
            }
        }
    }

    #[test]
    fn seeding_is_deterministic(seed in 0u64..10_000, rng_seed in any::<u64>()) {
        let net = random_net(seed);
        let a = sample_seeds(&net, 8, &Aabb::default(), TriggerScheme::Dichotomy, rng_seed);
        let b = sample_seeds(&net, 8, &Aabb::default(), TriggerScheme::Dichotomy, rng_seed);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn bisection_halves_the_bracket() {
    // F is affine on this segment, so F(x+) - F(x-) halves with the bracket.
    let net = octahedron(0.5);
    let (p, n) = (Vec3::new(0.9, 0.01, 0.01), Vec3::new(0.1, 0.01, 0.01));
    for (eps, want) in [(1e-6, 20), (1e-3, 10), (0.8, 0), (0.4, 1)] {
        let s = seed_dichotomy(&net, &p, &n, eps, 100).unwrap();
        assert_eq!(s.iterations, want, "eps {eps}");
    }
    assert!(matches!(
        seed_dichotomy(&net, &p, &n, 1e-6, 19),
        Err(TriggerError::NotConverged { iterations: 19 })
    ));
}

#[test]
fn sphere_trace_converges_in_one_step_on_a_plane_region() {
    let net = octahedron(0.5);
    // Inside the first octant the gradient is (1,1,1), so eta = 1/3 lands exactly.
    let s = seed_sphere_trace(&net, &Vec3::new(0.4, 0.3, 0.2), 1.0 / 3.0, 10, &Aabb::default()).unwrap();
    assert!(s.iterations <= 2);
    assert!(net.forward(&s.point).abs() <= SEED_TOL);
}

#[test]
fn occupancy_rejects_distance_schemes() {
    let occ = octahedron(0.5).to_occupancy(10.0).unwrap();
    for scheme in [TriggerScheme::Sgd, TriggerScheme::SphereTrace] {
        assert!(matches!(validate_scheme(&occ, scheme), Err(TriggerError::Unsupported { .. })));
        let cfg = MarchConfig { trigger: scheme, ..MarchConfig::default() };
        assert!(matches!(march(&occ, &cfg), Err(MarchError::Trigger(TriggerError::Unsupported { .. }))));
    }
    assert!(validate_scheme(&occ, TriggerScheme::Dichotomy).is_ok());
    assert!(sample_seeds(&occ, 4, &Aabb::default(), TriggerScheme::Dichotomy, 0).is_ok());
}

#[test]
fn empty_box_reports_no_surface() {
    let net = octahedron(0.5);
    let far = Aabb::new(Vec3::repeat(2.0), Vec3::repeat(3.0));
    assert!(matches!(
        sample_seeds(&net, 4, &far, TriggerScheme::Dichotomy, 0),
        Err(TriggerError::NoSurface)
    ));
}
