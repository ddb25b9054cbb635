//! Property-based invariants: parameter-swept round trips, pricing
//! monotonicity, degeneracy collapses, and simulator determinism.

use std::sync::OnceLock;

use proptest::prelude::*;

use gcir::calibration::kde;
use gcir::expansion::{CIRParams, ExpansionModel, PriceQuery};
use gcir::mcsim::{simulate_with_drift, Measure, Scheme, SimConfig, YInit};
use gcir::quad::integrate_tol;
use gcir::volprocess::{
    clustering_drift, stationary_density, DriftSpec, GridConfig, VolParams,
};

fn reference_model() -> &'static ExpansionModel {
    static MODEL: OnceLock<ExpansionModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let vol = VolParams::reference();
        let drift = clustering_drift(&vol).expect("reference drift");
        ExpansionModel::build(
            &CIRParams::reference(),
            drift,
            vol.v,
            &GridConfig::for_params(&vol),
        )
        .expect("reference model")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// The clustering drift must reproduce its target Gamma mixture for
    /// any admissible parameter set, not just the reference one.
    #[test]
    fn clustering_density_round_trips_across_parameters(
        kappa_y in 20.0..200.0f64,
        v in 0.3..1.5f64,
        theta1 in 0.01..0.05f64,
        theta2 in 0.07..0.2f64,
        k in 0.1..0.9f64,
    ) {
        // Feller margin on the tighter (low) component.
        prop_assume!(2.0 * kappa_y * theta1 > 1.3 * v * v);
        let vol = VolParams { kappa_y, v, theta1, theta2, k, epsilon: 0.01 };
        let drift = clustering_drift(&vol).unwrap();
        let density = stationary_density(&drift, vol.v, &GridConfig::for_params(&vol)).unwrap();
        let hi = (2.0 * theta2).min(density.support().1 * 0.999);
        let mut sup_rel = 0.0f64;
        for i in 0..=200 {
            let y = theta1 / 4.0 + (hi - theta1 / 4.0) * i as f64 / 200.0;
            let expected = vol.mixture_log_density(y).exp();
            sup_rel = sup_rel.max((density.density(y) - expected).abs() / expected);
        }
        prop_assert!(sup_rel <= 1e-5, "sup relative error {sup_rel:.3e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Discount bonds lose value as the short rate rises, at every
    /// truncation order and epsilon in the modeling range.
    #[test]
    fn price_decreases_in_short_rate(
        t in 0.0..0.9f64,
        r in 0.0..0.15f64,
        dr in 0.005..0.05f64,
        epsilon in 0.0..0.03f64,
        order in 0u8..=2,
    ) {
        let model = reference_model();
        let at = |rate: f64| {
            model
                .price(&PriceQuery { t, r: rate, y: None, epsilon, order })
                .unwrap()
                .price
        };
        prop_assert!(at(r + dr) < at(r), "price not decreasing at t={t}, r={r}");
    }

    /// At maturity the bond pays one, term by term.
    #[test]
    fn price_is_exactly_one_at_maturity(
        r in 0.0..0.2f64,
        epsilon in 0.0..0.05f64,
        order in 0u8..=2,
    ) {
        let model = reference_model();
        let result = model
            .price(&PriceQuery { t: 1.0, r, y: None, epsilon, order })
            .unwrap();
        prop_assert_eq!(result.price, 1.0);
    }

    /// Epsilon zero switches every correction off exactly.
    #[test]
    fn zero_epsilon_collapses_to_leading_order(
        t in 0.0..1.0f64,
        r in 0.0..0.2f64,
        order in 0u8..=2,
    ) {
        let model = reference_model();
        let result = model
            .price(&PriceQuery { t, r, y: None, epsilon: 0.0, order })
            .unwrap();
        prop_assert_eq!(result.price, result.p0);
        prop_assert_eq!(result.p1_term, 0.0);
        prop_assert_eq!(result.p2_bar_term, 0.0);
    }

    /// Very short maturities yield the short rate back.
    #[test]
    fn tiny_maturity_yield_is_the_short_rate(
        r0 in 0.01..0.15f64,
        epsilon in 0.0..0.02f64,
    ) {
        let model = reference_model();
        let point = model.term_structure(r0, &[1e-4], epsilon).unwrap()[0];
        prop_assert!(
            (point.r_order2 - r0).abs() <= 1e-3,
            "R(1e-4) = {} vs r0 = {r0}",
            point.r_order2
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// The fluctuation correction stays centered: its stationary mean
    /// vanishes at every valuation point.
    #[test]
    fn tilde_correction_mean_vanishes_everywhere(
        t in 0.1..0.9f64,
        r in 0.01..0.12f64,
    ) {
        let model = reference_model();
        let density = model.kernel().density();
        let (lo, hi) = density.support();
        let mean = integrate_tol(
            |y| model.tilde_p2(t, r, y).unwrap() * density.density(y),
            lo,
            hi,
            1e-14,
            1e-10,
        )
        .unwrap();
        prop_assert!(mean.abs() <= 1e-8, "stationary mean {mean:.3e} at t={t}, r={r}");
    }

    /// Kernel density curves carry unit mass and at least one mode for
    /// arbitrary estimate sets.
    #[test]
    fn kde_mass_is_unit_for_arbitrary_estimates(
        estimates in prop::collection::vec(0.01..0.2f64, 10..60),
    ) {
        let curve = kde(&estimates).unwrap();
        let mass = curve.total_mass();
        prop_assert!((mass - 1.0).abs() <= 1e-6, "mass {mass}");
        prop_assert!(curve.local_maxima() >= 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Path simulation is bitwise reproducible and keeps both factors
    /// nonnegative under either scheme and measure.
    #[test]
    fn simulation_reproduces_bitwise_and_stays_nonnegative(
        seed in any::<u64>(),
        n_paths in 2usize..5,
        dt in 0.001..0.045f64,
        horizon in 0.01..0.5f64,
        v in 0.0..0.5f64,
        theta_y in 0.02..0.1f64,
        lambda2 in -2.0..0.0f64,
        reflected in any::<bool>(),
        risk_neutral in any::<bool>(),
    ) {
        let drift = DriftSpec::linear(1.0, theta_y);
        let cir = CIRParams { lambda2, ..CIRParams::reference() };
        let cfg = SimConfig {
            dt,
            n_paths,
            horizon,
            seed,
            measure: if risk_neutral { Measure::RiskNeutral } else { Measure::Physical },
            scheme: if reflected { Scheme::ReflectedEuler } else { Scheme::FullTruncationEuler },
            store_paths: true,
            antithetic: false,
        };
        let run = || {
            simulate_with_drift(&drift, &cir, v, 1.0, 1, &cfg, 0.03, YInit::Fixed(theta_y))
                .unwrap()
        };
        let a = run();
        let b = run();
        prop_assert_eq!(&a.r_paths, &b.r_paths);
        prop_assert_eq!(&a.y_paths, &b.y_paths);
        prop_assert_eq!(&a.discount_integrals, &b.discount_integrals);
        for path in a.r_paths.iter().chain(&a.y_paths) {
            prop_assert!(path.iter().all(|&x| x >= 0.0));
        }
    }
}
