use proptest::prelude::*;

use spde_reflect::cli::parse_config;
use spde_reflect::coupling::{
    cutoff_complement, cutoff_h, cutoff_h_prime_sup, i_n, reflect_apply, sigma_n_apply, CouplingParams,
};
use spde_reflect::experiments::survival_curve;
use spde_reflect::integrator::{run_paths, RunMode, SimConfig};
use spde_reflect::models::ModelSpec;
use spde_reflect::spaces::{HMetric, SpectralSpace, StateVector};

const N: usize = 8;

fn space(metric: HMetric) -> SpectralSpace {
    let q: Vec<f64> = (1..=N).map(|i| (i as f64).powf(-0.75)).collect();
    SpectralSpace::new(N, 1.0, metric, q).unwrap()
}

fn vector() -> impl Strategy<Value = StateVector> {
    prop::collection::vec(-10.0f64..10.0, N).prop_map(StateVector::from_vec)
}

fn metric() -> impl Strategy<Value = HMetric> {
    prop_oneof![Just(HMetric::Dual), Just(HMetric::L2)]
}

proptest! {
    #[test]
    fn norms_are_homogeneous(m in metric(), x in vector(), c in -5.0f64..5.0) {
        let s = space(m);
        let lhs = s.h_norm(&x.scaled(c));
        prop_assert!((lhs - c.abs() * s.h_norm(&x)).abs() <= 1e-12 * (1.0 + lhs));
        let lq = s.q_norm(&x.scaled(c));
        prop_assert!((lq - c.abs() * s.q_norm(&x)).abs() <= 1e-10 * (1.0 + lq));
    }

    #[test]
    fn norms_satisfy_the_triangle_inequality(m in metric(), x in vector(), y in vector()) {
        let s = space(m);
        let sum = &x + &y;
        prop_assert!(s.h_norm(&sum) <= s.h_norm(&x) + s.h_norm(&y) + 1e-12);
        prop_assert!(s.q_norm(&sum) <= s.q_norm(&x) + s.q_norm(&y) + 1e-10);
        prop_assert!(s.lp_norm(&sum, 3.0) <= s.lp_norm(&x, 3.0) + s.lp_norm(&y, 3.0) + 1e-10);
    }

    #[test]
    fn h_coordinates_round_trip(m in metric(), x in vector()) {
        let s = space(m);
        let back = s.from_h_coords(&s.to_h_coords(&x));
        for (a, b) in back.coeffs().iter().zip(x.coeffs()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn projection_is_idempotent_and_reflection_is_an_isometry(
        m in metric(), u in vector(), v in vector(), w in vector(), n in 1u32..200
    ) {
        prop_assume!(u != v);
        let s = space(m);
        let p = sigma_n_apply(&s, &u, &v, n, &w).unwrap();
        let pp = sigma_n_apply(&s, &u, &v, n, &p).unwrap();
        prop_assert!(s.h_norm(&(&pp - &p)) <= 1e-10 * (1.0 + s.h_norm(&p)));
        let r = reflect_apply(&s, &u, &v, n, &w).unwrap();
        prop_assert!((s.h_norm(&r) - s.h_norm(&w)).abs() <= 1e-10 * (1.0 + s.h_norm(&w)));
    }

    #[test]
    fn cutoff_is_a_monotone_partition_of_unity(a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (hl, hh) = (cutoff_h(lo).unwrap(), cutoff_h(hi).unwrap());
        prop_assert!((0.0..=1.0).contains(&hl) && hl <= hh);
        let c = cutoff_complement(lo).unwrap();
        prop_assert!((c * c + hl * hl - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn i_n_is_nonnegative_and_linear_in_the_norm_bound(x in vector(), n in 1u32..200) {
        let s = space(HMetric::Dual);
        let v = i_n(&s, n, &x);
        let sup = cutoff_h_prime_sup();
        prop_assert!(v >= 0.0);
        prop_assert!(v <= 2.0 * sup * sup * s.h_norm(&x) * (1.0 + 1e-10));
    }

    #[test]
    fn config_hash_ignores_layout(seed in 0u64..1000, paths in 1usize..50) {
        let a = format!(
            "[model]\nfamily = \"porous\"\nr = 2.0\n[space]\nmodes = 6\ngamma = 2.0\ndelta = 0.75\n\
             [sim]\ndt = 1e-3\nhorizon = 0.01\npaths = {paths}\nseed = {seed}\nx0 = [0.1]\ny0 = [-0.1]\n"
        );
        let b = format!(
            "# reordered\n[sim]\ny0 = [-0.1]\nx0 = [0.1]\nseed = {seed}\npaths = {paths}\nhorizon = 0.01\ndt = 0.001\n\
             [space]\ndelta = 0.75\ngamma = 2.0\nmodes = 6\n[model]\nr = 2.0\nfamily = \"porous\"\n[output]\ndir = \"x\"\n"
        );
        prop_assert_eq!(parse_config(&a).unwrap().config_hash(), parse_config(&b).unwrap().config_hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn survival_curves_are_nonincreasing_and_start_at_one(seed in 0u64..10_000) {
        let s = space(HMetric::Dual);
        let model = ModelSpec::porous(1.0);
        let params = CouplingParams::with_default_glue(10).unwrap();
        let mut h = vec![0.0; N];
        h[0] = 0.1;
        let x = s.from_h_coords(&h);
        let y = x.scaled(-1.0);
        let cfg = SimConfig::new(1e-3, 0.05, 40, seed).unwrap().with_uniform_checkpoints(5);
        let ens = run_paths(&s, &model, Some(&params), &cfg, RunMode::Coupled, &x, &y).unwrap();
        let curve = survival_curve(&ens).unwrap();
        prop_assert_eq!(curve.estimates[0].value, 1.0);
        for w in curve.estimates.windows(2) {
            prop_assert!(w[1].value <= w[0].value);
        }
    }
}
