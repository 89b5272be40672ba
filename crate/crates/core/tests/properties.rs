use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;

use kbal::config::RunConfig;
use kbal::data::default_names;
use kbal::diagnostics::compare_imbalance;
use kbal::estimators::{estimate_ml, estimate_mlt, minimax_weights, EstimateReport, ReportMeta, ReportOptions};
use kbal::io::format_number;
use kbal::kernels::{gram_blocks, gram_matrix, matern_kernel};
use kbal::normal;
use kbal::simbench::aggregate;
use kbal::solver::{balance_norm, check_duality, objective, solve_weights};
use kbal::{Dataset, EstimatorKind, KernelSpec, TargetRule};

/// Small dataset with both groups present. `target` picks the rule:
/// 0 = all units, 1 = units with W = 1.
fn instance() -> impl Strategy<Value = Dataset> {
    (6usize..40, 1usize..4, 0u8..2).prop_flat_map(|(n, d, target)| {
        (
            prop::collection::vec(-2.0f64..2.0, n * d),
            prop::collection::vec(0u32..2, n - 2),
            prop::collection::vec(-5.0f64..5.0, n),
        )
            .prop_map(move |(xs, w_tail, ys)| {
                let x = DMatrix::from_row_slice(n, d, &xs);
                let mut w = vec![0, 1];
                w.extend(w_tail);
                let y = w.iter().zip(&ys).map(|(&wi, &yi)| (wi == 0).then_some(yi)).collect();
                let rule = if target == 0 { TargetRule::All } else { TargetRule::TreatmentEquals(1) };
                let t = rule.apply(&w);
                Dataset::new(x, w, y, t, default_names(d)).unwrap()
            })
    })
}

fn sigma() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1e-2), Just(0.1), Just(1.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn objective_is_imbalance_squared_plus_penalty(data in instance(), s in sigma()) {
        let blocks = gram_blocks(&data, &KernelSpec::default()).unwrap();
        let w = solve_weights(&blocks, data.n(), s * s).unwrap();
        let n = data.n() as f64;
        let norm2: f64 = w.gamma.iter().map(|g| g * g).sum();
        let want = w.imbalance * w.imbalance + s * s / (n * n) * norm2;
        prop_assert!((w.objective - want).abs() <= 1e-10 * (1.0 + want));
        prop_assert!(w.objective >= 0.0);
        prop_assert_eq!(w.gamma.len(), data.n_treated());
    }

    #[test]
    fn minimax_beats_random_candidates(
        data in instance(),
        s in sigma(),
        noise in prop::collection::vec(-1.0f64..1.0, 40),
    ) {
        let blocks = gram_blocks(&data, &KernelSpec::default()).unwrap();
        let w = solve_weights(&blocks, data.n(), s * s).unwrap();
        let perturbed: Vec<f64> = w.gamma.iter().zip(&noise).map(|(g, e)| g + e).collect();
        let ones = vec![1.0; w.gamma.len()];
        for cand in [&perturbed, &ones] {
            let o = objective(&blocks, cand, data.n(), s * s).unwrap();
            prop_assert!(w.objective <= o + 1e-10);
        }
    }

    #[test]
    fn weighting_and_ridge_forms_agree(data in instance(), s in sigma()) {
        let c = check_duality(&data, &KernelSpec::default(), s * s).unwrap();
        prop_assert!(c.gap <= 1e-8 * (1.0 + c.weighting_estimate.abs()));
    }

    #[test]
    fn mlt_is_translation_equivariant_and_ml_shifts_by_weight_mass(data in instance(), t in -100.0f64..100.0) {
        let spec = KernelSpec::default();
        let opts = ReportOptions { level: 0.95, scaled: true };
        let shifted = data.map_outcomes(|y| y + t);
        let a = estimate_mlt(&data, &spec, 0.1, &opts).unwrap().point;
        let b = estimate_mlt(&shifted, &spec, 0.1, &opts).unwrap().point;
        prop_assert!((b - a - t).abs() <= 1e-8 * (1.0 + t.abs()));
        let ratio = minimax_weights(&data, &spec, 0.1).unwrap().sum() / data.n_target() as f64;
        let a = estimate_ml(&data, &spec, 0.1, &opts).unwrap().point;
        let b = estimate_ml(&shifted, &spec, 0.1, &opts).unwrap().point;
        prop_assert!((b - a - t * ratio).abs() <= 1e-8 * (1.0 + t.abs()));
    }

    #[test]
    fn gram_is_symmetric_psd(data in instance(), nu in prop_oneof![Just(0.5), Just(1.5), Just(2.5)]) {
        let k = gram_matrix(data.covariates(), &KernelSpec::matern(nu)).unwrap();
        prop_assert!((&k - k.transpose()).amax() == 0.0);
        let min_eig = k.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min_eig >= -1e-10 * k.trace());
        prop_assert!(k.diagonal().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn matern_half_is_exponential(r in 0.0f64..20.0) {
        assert_relative_eq!(matern_kernel(r, 0.5).unwrap(), (-r).exp(), max_relative = 1e-14);
    }

    #[test]
    fn imbalance_scales_with_kernel_amplitude(data in instance(), c in 0.1f64..10.0, gs in prop::collection::vec(0.0f64..3.0, 40)) {
        let blocks = gram_blocks(&data, &KernelSpec::default()).unwrap();
        let gamma = &gs[..data.n_treated()];
        let base = balance_norm(&blocks, gamma, data.n()).unwrap();
        let scaled = balance_norm(&blocks.scaled(c * c), gamma, data.n()).unwrap();
        prop_assert!((scaled - c * base).abs() <= 1e-10 * (1.0 + c * base));
    }

    #[test]
    fn solution_never_worse_than_zero_weights(data in instance(), s in sigma()) {
        let blocks = gram_blocks(&data, &KernelSpec::default()).unwrap();
        let w = solve_weights(&blocks, data.n(), s * s).unwrap();
        let zero = balance_norm(&blocks, &vec![0.0; w.gamma.len()], data.n()).unwrap();
        prop_assert!(w.imbalance <= zero + 1e-12);
    }

    #[test]
    fn minimax_row_is_minimal(data in instance(), sets in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 40), 1..6)) {
        let named: Vec<(String, Vec<f64>)> = sets
            .into_iter()
            .enumerate()
            .map(|(i, g)| (format!("set{i}"), g[..data.n_treated()].to_vec()))
            .collect();
        let table = compare_imbalance(&data, &KernelSpec::default(), 0.1, &named).unwrap();
        prop_assert!(table.minimax_is_minimal);
        let best = table.rows[0].objective.unwrap();
        for r in &table.rows[1..] {
            prop_assert!(best <= r.objective.unwrap() + 1e-10);
        }
    }

    #[test]
    fn rmse_decomposes_into_bias_and_spread(points in prop::collection::vec(-50.0f64..50.0, 1..60), truth in -10.0f64..10.0) {
        let reports: Vec<kbal::Result<EstimateReport>> = points
            .iter()
            .map(|&p| Ok(EstimateReport {
                estimator: EstimatorKind::Mlt,
                point: p,
                variance: 1.0,
                half_width: 1.0,
                ci_low: p - 1.0,
                ci_high: p + 1.0,
                level: 0.95,
                scaled: true,
                meta: ReportMeta::default(),
            }))
            .collect();
        let agg = aggregate(truth, &reports);
        let k = points.len() as f64;
        let mean = points.iter().sum::<f64>() / k;
        let var = points.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / k;
        let lhs = agg.rmse * agg.rmse;
        let rhs = agg.bias * agg.bias + var;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs));
    }

    #[test]
    fn quantile_inverts_cdf(p in 1e-12f64..(1.0 - 1e-12)) {
        let x = normal::quantile(p);
        prop_assert!((normal::cdf(x) - p).abs() <= 1e-13 + 1e-12 * p);
    }

    #[test]
    fn numbers_round_trip(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(v.is_finite());
        prop_assert_eq!(format_number(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn run_config_round_trips(
        sigma in 1e-4f64..10.0,
        level in 0.5f64..0.999,
        scaled in any::<bool>(),
        seed in any::<u64>(),
        lengthscale in 0.1f64..5.0,
        nu in prop_oneof![Just(0.5), Just(1.5), Just(2.5)],
    ) {
        let cfg = RunConfig {
            sigma,
            level,
            scaled,
            seed,
            kernel: KernelSpec::matern(nu).with_lengthscale(lengthscale),
            estimators: vec![EstimatorKind::Mlt, EstimatorKind::Ols],
            ..Default::default()
        };
        let back = RunConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

/// With a linear kernel plus a constant column the ridge fit approaches the
/// least-squares fit as σ shrinks, so ML approaches OLS.
#[test]
fn ml_tends_to_ols_under_linear_kernel() {
    use kbal::estimators::estimate_ols;
    use kbal::simbench::generate;
    use kbal::DgpSpec;

    // Unit-scale covariates keep K_ZZ well conditioned, so the ridge path
    // reaches its limit before jitter or rounding take over.
    let raw = generate(&DgpSpec::kang_schafer(300, 1.0, 5)).unwrap().data;
    let mut x = raw.covariates().clone();
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let sd = col.norm() / (col.len() as f64).sqrt();
        col /= sd;
    }
    let base = Dataset::new(x, raw.treatment().to_vec(), raw.outcomes().to_vec(), raw.targets().to_vec(), raw.column_names().to_vec()).unwrap();
    let data = base.with_constant_column(1.0, "const");
    let spec = KernelSpec::linear();
    let opts = ReportOptions { level: 0.95, scaled: true };
    let ols = estimate_ols(&base, &opts).unwrap().point;
    let gaps: Vec<f64> = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8]
        .iter()
        .map(|&s| (estimate_ml(&data, &spec, s, &opts).unwrap().point - ols).abs())
        .collect();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "{gaps:?}");
    assert!(gaps[6] < 1e-8, "{gaps:?}");
}
