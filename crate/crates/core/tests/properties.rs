use mfgkit::finite_nash::{nash_system_residual, DriftEvaluation, EmpiricalMeasure};
use mfgkit::linalg::{asymmetry, Mat, Vector};
use mfgkit::lq_model::{solve_master_mfc, solve_master_mfg, LQParams};
use mfgkit::master_residual::{random_samples, residual_mfc, residual_mfg};
use mfgkit::mckean_vlasov::FundamentalMatrix;
use mfgkit::riccati::{integrate_backward, AffineQuadraticField, TimeGrid};
use mfgkit::systemic_risk::{solve_systemic, SystemicParams};
use mfgkit::table::Table;
use proptest::prelude::*;

fn matrix(n: usize, scale: f64) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0..1.0_f64, n * n).prop_map(move |v| Mat::from_vec(n, n, v) * scale)
}

fn psd(n: usize, scale: f64) -> impl Strategy<Value = Mat> {
    matrix(n, scale).prop_map(|l| &l * l.transpose())
}

/// Random two-dimensional problem with moderate coefficients.
fn lq_params() -> impl Strategy<Value = LQParams> {
    (
        (matrix(2, 0.5), matrix(2, 0.3), matrix(2, 1.0), psd(2, 0.8), psd(2, 0.8)),
        (psd(2, 0.6), psd(2, 0.6), matrix(2, 0.5), matrix(2, 0.5), psd(2, 0.5)),
        (matrix(2, 0.4), 0.0..1.0_f64),
    )
        .prop_map(|((a, a_bar, b, q, q_bar), (q_t, q_bar_t, s, s_t, r), (sigma, beta))| LQParams {
            a,
            a_bar,
            b: b + Mat::identity(2, 2) * 1.5,
            q,
            q_bar,
            q_t,
            q_bar_t,
            s,
            s_t,
            r: r + Mat::identity(2, 2),
            sigma,
            beta,
            horizon: 1.0,
        })
}

fn grid(steps: usize) -> TimeGrid {
    TimeGrid::horizon(1.0, steps).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn riccati_preserves_symmetry_and_terminal(a in matrix(3, 0.5), k in psd(3, 0.7), c in psd(3, 1.0), term in psd(3, 1.0)) {
        let field = AffineQuadraticField::lq(&a, &k, &c).unwrap();
        let sol = integrate_backward(&field, &term, &grid(200)).unwrap();
        prop_assert!(sol.values().iter().all(|m| asymmetry(m) <= 1e-12));
        prop_assert_eq!(sol.terminal(), &term);
    }

    #[test]
    fn mfc_sigma_is_symmetric(p in lq_params()) {
        let ans = solve_master_mfc(&p, &grid(100), &[0.5, 1.0, 2.0]).unwrap();
        for fam in ans.families() {
            prop_assert!(fam.sigma.values().iter().all(|m| asymmetry(m) <= 1e-10));
        }
    }

    #[test]
    fn beta_does_not_enter_the_riccati_flows(p in lq_params()) {
        let p0 = LQParams { beta: 0.0, ..p.clone() };
        let p1 = LQParams { beta: 1.0, ..p };
        for solve in [solve_master_mfc, solve_master_mfg] {
            let a0 = solve(&p0, &grid(80), &[1.0, 2.0]).unwrap();
            let a1 = solve(&p1, &grid(80), &[1.0, 2.0]).unwrap();
            prop_assert_eq!(a0.p_solution(), a1.p_solution());
            for (f0, f1) in a0.families().iter().zip(a1.families()) {
                prop_assert_eq!(&f0.sigma, &f1.sigma);
                prop_assert_eq!(&f0.gamma, &f1.gamma);
            }
        }
    }

    #[test]
    fn residuals_agree_without_mean_coupling(p in lq_params(), seed in any::<u64>()) {
        let p = LQParams { q_bar: Mat::zeros(2, 2), q_bar_t: Mat::zeros(2, 2), a_bar: Mat::zeros(2, 2), ..p };
        let samples = random_samples(2, 10, &[0.5, 1.0, 2.0], 1.0, 2.0, seed);
        let mfc = residual_mfc(&solve_master_mfc(&p, &grid(400), &[0.5, 1.0, 2.0]).unwrap(), &samples).unwrap();
        let mfg = residual_mfg(&solve_master_mfg(&p, &grid(400), &[0.5, 1.0, 2.0]).unwrap(), &samples).unwrap();
        for (a, b) in mfc.residuals.iter().zip(&mfg.residuals) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn nash_residual_is_exchangeable(p in lq_params(), xs in prop::collection::vec(-1.0..1.0_f64, 10), shift in 1usize..5) {
        let ans = solve_master_mfg(&p, &grid(100), &[1.0]).unwrap();
        let states: Vec<Vector> = xs.chunks(2).map(Vector::from_column_slice).collect();
        let n = states.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let permuted: Vec<Vector> = perm.iter().map(|&j| states[j].clone()).collect();
        for conv in [DriftEvaluation::PlayerMeasure, DriftEvaluation::ReferenceMeasure] {
            let r = nash_system_residual(&ans, &states, 0.4, conv).unwrap();
            let rp = nash_system_residual(&ans, &permuted, 0.4, conv).unwrap();
            for (i, &j) in perm.iter().enumerate() {
                prop_assert!((rp[i] - r[j]).abs() <= 1e-12 * (1.0 + r[j].abs()));
            }
        }
    }

    #[test]
    fn normalized_empirical_mass_is_one(xs in prop::collection::vec(-1e3..1e3_f64, 1..40)) {
        let points: Vec<Vector> = xs.iter().map(|x| Vector::from_element(1, *x)).collect();
        prop_assert_eq!(EmpiricalMeasure::normalized(points).unwrap().moments().m1, 1.0);
    }

    #[test]
    fn fundamental_matrix_flow_property(a in matrix(2, 1.0), b in matrix(2, 1.0), i in 0usize..50, j in 0usize..50, k in 0usize..50) {
        let g = grid(50);
        let phi = FundamentalMatrix::new(&g, &|t| &a + &b * t);
        let mut idx = [i, j, k];
        idx.sort();
        let [s, r, t] = idx;
        let direct = phi.compose(t, s).unwrap();
        let split = phi.compose(t, r).unwrap() * phi.compose(r, s).unwrap();
        prop_assert!((direct - split).amax() <= 1e-10);
    }

    #[test]
    fn systemic_p_between_terminal_and_fixed_point(alpha in 0.05..3.0_f64, lambda in 0.0..2.0_f64, excess in 0.0..2.0_f64, c in 0.0..3.0_f64) {
        let p = SystemicParams { alpha, lambda, mu: lambda * lambda + excess, c, sigma: 0.2, beta: 0.3, horizon: 1.0 };
        let sol = solve_systemic(&p, &grid(200)).unwrap();
        let (lo, hi) = (c.min(p.fixed_point()), c.max(p.fixed_point()));
        prop_assert!(sol.p_solution().values().iter().all(|m| m[(0, 0)] >= lo - 1e-12 && m[(0, 0)] <= hi + 1e-12));
    }

    #[test]
    fn csv_round_trip_is_bitwise(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..30)) {
        let mut t = Table::new(["v"]);
        for v in &values {
            t.push(vec![*v]).unwrap();
        }
        let mut buf = Vec::new();
        t.write_csv(&mut buf, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back: Vec<f64> = text.lines().skip(1).map(|l| l.parse().unwrap()).collect();
        prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
