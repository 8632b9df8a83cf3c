mod common;

use common::{point_in, random_net, rng};
use exactmesh::net::{region_count_lower_bound, state_space_size, FieldKind, NetError, NetworkSpec};
use exactmesh::Vec3;
use num_bigint::BigUint;
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn face_plane_reproduces_forward(seed in 0u64..10_000, pseed in any::<u64>()) {
        let net = random_net(seed);
        let mut r = rng(pseed);
        for _ in 0..8 {
            let x = point_in(&mut r, 1.2);
            let s = net.state_at(&x);
            let maps = net.affine_maps(&s).unwrap();
            prop_assert!(close(maps.face_plane.eval(&x), net.forward(&x), 1e-9));
        }
    }

    #[test]
    fn neuron_planes_reproduce_preactivations(seed in 0u64..10_000, pseed in any::<u64>()) {
        let net = random_net(seed);
        let mut r = rng(pseed);
        let x = point_in(&mut r, 1.2);
        let (pre, _) = net.preactivations(&x);
        let s = net.state_at(&x);
        let maps = net.affine_maps(&s).unwrap();
        prop_assert_eq!(pre.len(), maps.neuron_planes.len());
        for (k, (p, plane)) in pre.iter().zip(&maps.neuron_planes).enumerate() {
            prop_assert!(close(*p, plane.eval(&x), 1e-9), "neuron {}: {} vs {}", k, p, plane.eval(&x));
            prop_assert_eq!(s.get(k), *p > 0.0);
        }
    }

    #[test]
    fn branch_planes_are_nonpositive_at_the_point(seed in 0u64..10_000, pseed in any::<u64>()) {
        let net = random_net(seed);
        let mut r = rng(pseed);
        let x = point_in(&mut r, 1.2);
        let maps = net.affine_maps(&net.state_at(&x)).unwrap();
        for (_, p) in &maps.branch_planes {
            prop_assert!(p.eval(&x) <= 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences(seed in 0u64..10_000, pseed in any::<u64>()) {
        let net = random_net(seed);
        let mut r = rng(pseed);
        let x = point_in(&mut r, 1.0);
        let h = 1e-6;
        let s = net.state_at(&x);
        let offsets: Vec<Vec3> = (0..3).flat_map(|i| {
            let mut e = Vec3::zeros();
            e[i] = h;
            [e, -e]
        }).collect();
        // Finite differences are only meaningful inside one linear region.
        prop_assume!(offsets.iter().all(|d| net.state_at(&(x + d)) == s));
        let g = net.grad_input(&x);
        for i in 0..3 {
            let fd = (net.forward(&(x + offsets[2 * i])) - net.forward(&(x + offsets[2 * i + 1]))) / (2.0 * h);
            prop_assert!(close(fd, g[i], 1e-6), "axis {}: fd {} analytic {}", i, fd, g[i]);
        }
    }

    #[test]
    fn batch_forward_is_bitwise_pointwise(seed in 0u64..10_000, pseed in any::<u64>()) {
        let net = random_net(seed);
        let mut r = rng(pseed);
        let xs: Vec<Vec3> = (0..17).map(|_| point_in(&mut r, 1.5)).collect();
        let batch = net.forward_batch(&xs);
        for (x, b) in xs.iter().zip(&batch) {
            prop_assert!(close(*b, net.forward(x), 1e-12));
        }
    }

    #[test]
    fn interval_encloses_samples(seed in 0u64..10_000, pseed in any::<u64>(), half in 0.001f64..0.8) {
        let net = random_net(seed);
        let mut r = rng(pseed);
        let c = point_in(&mut r, 1.0);
        let (lo, hi) = (c - Vec3::repeat(half), c + Vec3::repeat(half));
        let (a, b) = net.interval(&lo, &hi);
        prop_assert!(a <= b);
        for _ in 0..32 {
            let x = c + point_in(&mut r, half);
            let f = net.forward(&x);
            prop_assert!(a - 1e-9 <= f && f <= b + 1e-9, "{} not in [{}, {}]", f, a, b);
        }
    }

    #[test]
    fn json_round_trip_is_exact(seed in 0u64..10_000, pseed in any::<u64>()) {
        let net = random_net(seed);
        let back = NetworkSpec::from_json_str(&net.to_json_string(), "memory").unwrap();
        prop_assert_eq!(&back, &net);
        let mut r = rng(pseed);
        let x = point_in(&mut r, 1.2);
        prop_assert_eq!(back.forward(&x).to_bits(), net.forward(&x).to_bits());
    }

    #[test]
    fn occupancy_conversion_keeps_inside(seed in 0u64..10_000, pseed in any::<u64>(), scale in 0.1f64..50.0) {
        let net = random_net(seed);
        if net.is_ensemble() {
            prop_assert!(net.to_occupancy(scale).is_err());
            return Ok(());
        }
        let occ = net.to_occupancy(scale).unwrap();
        prop_assert_eq!(occ.field_kind, FieldKind::Occupancy);
        let mut r = rng(pseed);
        for _ in 0..8 {
            let x = point_in(&mut r, 1.2);
            if net.forward(&x).abs() > 1e-9 {
                prop_assert_eq!(occ.is_inside(&x), net.is_inside(&x));
            }
        }
    }

    #[test]
    fn ensemble_is_max_of_subnetworks(seed in 0u64..10_000, pseed in any::<u64>()) {
        let net = random_net(seed);
        let mut r = rng(pseed);
        let x = point_in(&mut r, 1.2);
        let vals: Vec<f64> = net
            .subnetworks
            .iter()
            .map(|s| NetworkSpec { field_kind: net.field_kind, subnetworks: vec![s.clone()] }.forward(&x))
            .collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(close(net.forward(&x), max, 1e-12));
        if let Some(b) = net.state_at(&x).branch {
            prop_assert_eq!(vals[b], max);
            prop_assert!(vals[..b].iter().all(|&v| v < max));
        }
    }

    #[test]
    fn single_layer_bound_is_binomial_sum(n in 3usize..200, n0 in 1usize..4) {
        prop_assume!(n >= n0);
        let mut want = BigUint::from(0u32);
        let mut c = BigUint::from(1u32);
        for j in 0..=n0 {
            if j > 0 {
                c = c * BigUint::from(n - j + 1) / BigUint::from(j);
            }
            want += &c;
        }
        prop_assert_eq!(region_count_lower_bound(&[n], n0).unwrap(), want);
    }

    #[test]
    fn state_space_dominates_region_bound(n in 3usize..40, depth in 1usize..5) {
        let widths = vec![n; depth];
        let bound = region_count_lower_bound(&widths, 3).unwrap();
        prop_assert!(bound <= state_space_size(n * depth));
    }
}

#[test]
fn region_bound_reference_values() {
    // Exact integer evaluation of the product-of-floors times binomial-sum formula.
    let cases: [(&[usize], usize, &str); 12] = [
        (&[3], 2, "7"),
        (&[6], 3, "42"),
        (&[10], 1, "11"),
        (&[5, 3], 3, "8"),
        (&[8, 8], 3, "744"),
        (&[4, 4, 4], 2, "176"),
        (&[7, 5, 9], 3, "1040"),
        (&[32, 16], 2, "35072"),
        (&[100, 50], 3, "750220812"),
        (&[16, 16, 16, 16], 3, "1361328125"),
        (&[24, 24, 24, 24, 24, 24], 3, "81803665106534400"),
        (&[60, 60, 60, 60, 60, 60], 3, "1181319168000000000000000"),
    ];
    for (widths, n0, want) in cases {
        let got = region_count_lower_bound(widths, n0).unwrap();
        assert_eq!(got, want.parse::<BigUint>().unwrap(), "{widths:?}, n0 = {n0}");
    }
}

#[test]
fn region_bound_rejects_narrow_layers() {
    assert!(matches!(
        region_count_lower_bound(&[2, 2], 3),
        Err(NetError::WidthBelowInput { width: 2, n0: 3 })
    ));
    assert!(region_count_lower_bound(&[], 3).is_err());
    assert!(region_count_lower_bound(&[4], 0).is_err());
}
