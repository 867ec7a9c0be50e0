//! Term-by-term evaluation of the Master equation on the quadratic ansatz.
//!
//! With common noise of intensity `β` the Master equation reads
//!
//! ```text
//! −∂U/∂t − ½ tr(a D²U) − ½β² ΔU − ∫ D_ξ ∂U/∂m(ξ) · G(ξ,m,D_ξU(ξ)) m(ξ)dξ
//!   − β² ∫ tr D_x D_ξ ∂U/∂m(ξ) m(ξ)dξ − ½β² ∫∫ tr D_ξ D_η ∂²U/∂m²(ξ,η) m(ξ)m(η)dξdη
//!   = H(x,m,DU) [+ ∫ ∂H/∂m(ξ,m,D_ξU(ξ))(x) m(ξ)dξ  for the control problem]
//! ```
//!
//! Every integrand is affine or bilinear in `ξ, η`, so the integrals contract
//! exactly against `(m₁, y)`.

use rand::Rng;

use crate::error::Result;
use crate::exec::Exec;
use crate::linalg::{max_abs_diff, Mat, Vector};
use crate::lq_model::{
    eval_u, eval_u_with, eval_v, hamiltonian, hamiltonian_mean_gradient, optimal_drift, Kind, MasterAnsatz,
    MeanFieldFamily, MeasureMoments,
};
use crate::rng::substream;
use crate::table::{indexed, Table};

/// Central-difference step for `m₁`-partials.
pub const MASS_STEP: f64 = 1e-4;

/// Closed-form derivatives of `U` at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeBundle {
    /// `D_x U`.
    pub du: Vector,
    /// `D²_x U`.
    pub d2u: Mat,
    /// Coefficient of `ξ` in `∂U/∂m(ξ)`, which is also `D_ξ ∂U/∂m(ξ)`.
    pub dudm_linear: Vector,
    /// `ξ`-independent part of `∂U/∂m(ξ)`, from `m₁`-partials.
    pub dudm_const: f64,
    /// `B` in `∂²U/∂m²(ξ,η) = ηᵀ B ξ + …`.
    pub d2udm2_bilinear: Mat,
    pub trace_gamma: f64,
    pub trace_sigma: f64,
}

/// One sample point.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vector,
    pub mom: MeasureMoments,
    pub t: f64,
}

/// Signed contributions to `LHS − RHS`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ResidualTerms {
    /// `−∂U/∂t`.
    pub time: f64,
    /// `−½ tr(a D²U)`.
    pub diffusion: f64,
    /// `−½β² ΔU`.
    pub common_laplacian: f64,
    /// `−∫ D_ξ∂U/∂m · G m`.
    pub measure_flow: f64,
    /// `−β² ∫ tr D_x D_ξ ∂U/∂m m`.
    pub common_cross: f64,
    /// `−½β² ∫∫ tr D_ξD_η ∂²U/∂m² m m`.
    pub common_second_order: f64,
    /// `−H(x,m,DU)`.
    pub hamiltonian: f64,
    /// `−∫ ∂H/∂m(ξ)(x) m`, zero for the game.
    pub mean_hamiltonian: f64,
}

impl ResidualTerms {
    pub const NAMES: [&'static str; 8] = [
        "time",
        "diffusion",
        "common_laplacian",
        "measure_flow",
        "common_cross",
        "common_second_order",
        "hamiltonian",
        "mean_hamiltonian",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.time,
            self.diffusion,
            self.common_laplacian,
            self.measure_flow,
            self.common_cross,
            self.common_second_order,
            self.hamiltonian,
            self.mean_hamiltonian,
        ]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    pub samples: Vec<Sample>,
    pub residuals: Vec<f64>,
    pub terms: Vec<ResidualTerms>,
    pub max_abs: f64,
}

impl ResidualReport {
    fn from_parts(samples: &[Sample], terms: Vec<ResidualTerms>) -> Self {
        let residuals: Vec<f64> = terms.iter().map(ResidualTerms::total).collect();
        let max_abs = residuals.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Self {
            samples: samples.to_vec(),
            residuals,
            terms,
            max_abs,
        }
    }

    pub fn to_table(&self) -> Table {
        let n = self.samples.first().map_or(0, |s| s.x.len());
        let header = std::iter::once("t".to_string())
            .chain(indexed("x", n))
            .chain(std::iter::once("m1".to_string()))
            .chain(indexed("y", n))
            .chain(std::iter::once("residual".to_string()))
            .chain(ResidualTerms::NAMES.iter().map(|s| s.to_string()));
        let mut table = Table::new(header);
        for ((s, r), terms) in self.samples.iter().zip(&self.residuals).zip(&self.terms) {
            let mut row = vec![s.t];
            row.extend(s.x.iter());
            row.push(s.mom.m1);
            row.extend(s.mom.y.iter());
            row.push(*r);
            row.extend(terms.values());
            table.push(row).expect("row width matches header");
        }
        table
    }
}

fn mass_partials(ans: &MasterAnsatz, x: &Vector, y: &Vector, m1: f64, t: f64) -> Result<f64> {
    // Only the ξ-free part of U depends on m₁ beyond y; difference it directly.
    let plus = ans.family(m1 + MASS_STEP)?;
    let minus = ans.family(m1 - MASS_STEP)?;
    let up = eval_u_with(ans, &plus, x, y, t)?;
    let um = eval_u_with(ans, &minus, x, y, t)?;
    Ok((up - um) / (2.0 * MASS_STEP))
}

fn bundle_with(ans: &MasterAnsatz, fam: &MeanFieldFamily, x: &Vector, y: &Vector, t: f64) -> Result<DerivativeBundle> {
    let p = ans.p_at(t)?;
    let sig = ans.sigma_at(fam, t)?;
    let gam = ans.gamma_at(fam, t)?;
    let du = &p * x + &sig * y;
    let dudm_linear = match ans.kind() {
        Kind::Mfc => &sig * x + &gam * y,
        Kind::Mfg => sig.transpose() * x + &gam * y,
    };
    Ok(DerivativeBundle {
        du,
        d2u: p,
        dudm_linear,
        dudm_const: 0.0,
        trace_gamma: gam.trace(),
        trace_sigma: sig.trace(),
        d2udm2_bilinear: gam,
    })
}

/// Closed-form derivatives of `U`; `m₁`-partials by central differences over
/// re-solved families.
pub fn analytic_derivatives(ans: &MasterAnsatz, x: &Vector, mom: &MeasureMoments, t: f64) -> Result<DerivativeBundle> {
    let fam = ans.family(mom.m1)?;
    let mut b = bundle_with(ans, &fam, x, &mom.y, t)?;
    b.dudm_const = mass_partials(ans, x, &mom.y, mom.m1, t)?;
    Ok(b)
}

/// `∫ F(ξ) m(dξ)` for affine `F`, given `F(y)` and `F(0)`.
fn contract_affine<T>(f_at_y: T, f_at_0: T, m1: f64) -> T
where
    T: std::ops::Sub<T, Output = T> + std::ops::Add<T, Output = T> + std::ops::Mul<f64, Output = T> + Clone,
{
    f_at_y - f_at_0.clone() + f_at_0 * m1
}

fn residual_terms(ans: &MasterAnsatz, fam: &MeanFieldFamily, s: &Sample) -> Result<ResidualTerms> {
    let params = ans.params();
    let (x, mom, t) = (&s.x, &s.mom, s.t);
    let (m1, y) = (mom.m1, &mom.y);
    let n = ans.n();
    let b2 = params.beta * params.beta;
    let bundle = bundle_with(ans, fam, x, y, t)?;

    let p_dot = ans.p_dot(t)?;
    let s_dot = ans.sigma_dot(fam, t)?;
    let g_dot = ans.gamma_dot(fam, t)?;
    let cross_dot = match ans.kind() {
        Kind::Mfc => y.dot(&(&s_dot * x)),
        Kind::Mfg => x.dot(&(&s_dot * y)),
    };
    let u_dot = 0.5 * x.dot(&(&p_dot * x)) + cross_dot + 0.5 * y.dot(&(&g_dot * y)) + ans.mu_dot(fam, t)?;

    let sig = ans.sigma_at(fam, t)?;
    let du_at = |xi: &Vector| &bundle.d2u * xi + &sig * y;
    let zero = Vector::zeros(n);

    let drift = |xi: &Vector| optimal_drift(params, xi, mom, &du_at(xi));
    let flow = contract_affine(drift(y), drift(&zero), m1);

    let mean_h = match ans.kind() {
        Kind::Mfc => {
            let grad = |xi: &Vector| hamiltonian_mean_gradient(params, xi, y, &du_at(xi));
            x.dot(&contract_affine(grad(y), grad(&zero), m1))
        }
        Kind::Mfg => 0.0,
    };

    Ok(ResidualTerms {
        time: -u_dot,
        diffusion: -0.5 * (params.diffusion() * &bundle.d2u).trace(),
        common_laplacian: -0.5 * b2 * bundle.d2u.trace(),
        measure_flow: -bundle.dudm_linear.dot(&flow),
        common_cross: -b2 * m1 * bundle.trace_sigma,
        common_second_order: -0.5 * b2 * m1 * m1 * bundle.trace_gamma,
        hamiltonian: -hamiltonian(params, x, mom, &bundle.du),
        mean_hamiltonian: -mean_h,
    })
}

fn residual(ans: &MasterAnsatz, samples: &[Sample]) -> Result<ResidualReport> {
    let mut masses: Vec<f64> = samples.iter().map(|s| s.mom.m1).collect();
    masses.sort_by(f64::total_cmp);
    masses.dedup();
    let families = Exec::Parallel
        .map(masses.len(), |i| ans.family(masses[i]).map(|f| f.into_owned()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let terms = Exec::Parallel
        .map(samples.len(), |i| {
            let s = &samples[i];
            let fam = families
                .iter()
                .find(|f| f.m1 == s.mom.m1)
                .expect("family solved for every sample mass");
            residual_terms(ans, fam, s)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualReport::from_parts(samples, terms))
}

/// Master equation residual of the control ansatz.
pub fn residual_mfc(ans: &MasterAnsatz, samples: &[Sample]) -> Result<ResidualReport> {
    ans.require(Kind::Mfc)?;
    residual(ans, samples)
}

/// Master equation residual of the game ansatz.
pub fn residual_mfg(ans: &MasterAnsatz, samples: &[Sample]) -> Result<ResidualReport> {
    ans.require(Kind::Mfg)?;
    residual(ans, samples)
}

/// `max_{i,j} |∂U(eᵢ)/∂m(eⱼ) − ∂U(eⱼ)/∂m(eᵢ)|` restricted to the part of the
/// kernel bilinear in `(x, ξ)`, i.e. `max |Σ − Σᵀ|`.
pub fn symmetry_defect(ans: &MasterAnsatz, mom: &MeasureMoments, t: f64) -> Result<f64> {
    let fam = ans.family(mom.m1)?;
    let sig = ans.sigma_at(&fam, t)?;
    let n = ans.n();
    let mut defect = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            // ∂U(x)/∂m(ξ) ∋ ξᵀ K x with K = Σ (control) or Σᵀ (game).
            let k_ij = match ans.kind() {
                Kind::Mfc => sig[(j, i)],
                Kind::Mfg => sig[(i, j)],
            };
            let k_ji = match ans.kind() {
                Kind::Mfc => sig[(i, j)],
                Kind::Mfg => sig[(j, i)],
            };
            defect = defect.max((k_ij - k_ji).abs());
        }
    }
    Ok(defect)
}

/// `max_t |Γ(t,m₁) − (Σ(t,m₁+h) − Σ(t,m₁−h))/(2h)|` over the grid nodes,
/// with `h = MASS_STEP`.
pub fn gamma_mass_fd_defect(ans: &MasterAnsatz, m1: f64) -> Result<f64> {
    let fam = ans.family(m1)?;
    let plus = ans.family(m1 + MASS_STEP)?;
    let minus = ans.family(m1 - MASS_STEP)?;
    let mut defect = 0.0_f64;
    for t in ans.grid().nodes() {
        let fd = (ans.sigma_at(&plus, t)? - ans.sigma_at(&minus, t)?) / (2.0 * MASS_STEP);
        defect = defect.max(max_abs_diff(&ans.gamma_at(&fam, t)?, &fd));
    }
    Ok(defect)
}

/// Gâteaux step for [`gateaux_check_v`].
pub const GATEAUX_STEP: f64 = 1e-5;

/// `|(V(m+θm̃) − V(m−θm̃))/(2θ) − ⟨U(·,m,t), m̃⟩|`.
pub fn gateaux_check_v(ans: &MasterAnsatz, mom: &MeasureMoments, direction: &MeasureMoments, t: f64) -> Result<f64> {
    ans.require(Kind::Mfc)?;
    let vp = eval_v(ans, &mom.shifted(direction, GATEAUX_STEP), t)?;
    let vm = eval_v(ans, &mom.shifted(direction, -GATEAUX_STEP), t)?;
    let fd = (vp - vm) / (2.0 * GATEAUX_STEP);

    // ⟨U(·,m,t), m̃⟩ = ½ tr(P M̃₂) + yᵀΣỹ + (½ yᵀΓy + μ) m̃₁
    let fam = ans.family(mom.m1)?;
    let p = ans.p_at(t)?;
    let sig = ans.sigma_at(&fam, t)?;
    let gam = ans.gamma_at(&fam, t)?;
    let y = &mom.y;
    let pairing = 0.5 * (&p * &direction.m2).trace()
        + y.dot(&(&sig * &direction.y))
        + (0.5 * y.dot(&(&gam * y)) + ans.mu_at(&fam, t)?) * direction.m1;
    Ok((fd - pairing).abs())
}

/// Random samples: `x` uniform in `[−x_range, x_range]ⁿ`, Gaussian moments
/// with mass drawn from `masses`, `t` uniform in the open horizon.
pub fn random_samples(n: usize, count: usize, masses: &[f64], horizon: f64, x_range: f64, seed: u64) -> Vec<Sample> {
    (0..count)
        .map(|i| {
            let mut rng = substream(seed, i as u64, 0);
            let x = Vector::from_fn(n, |_, _| rng.random_range(-x_range..=x_range));
            let mean = Vector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
            let l = Mat::from_fn(n, n, |_, _| rng.random_range(-0.5..=0.5));
            let cov = &l * l.transpose() + Mat::identity(n, n) * 0.1;
            let m1 = masses[rng.random_range(0..masses.len())];
            let t = horizon * rng.random_range(0.001..0.999);
            Sample {
                x,
                mom: MeasureMoments::gaussian(m1, &mean, &cov),
                t,
            }
        })
        .collect()
}

/// `U` through [`eval_u`], convenient for finite-difference oracles.
pub fn u_at(ans: &MasterAnsatz, s: &Sample) -> Result<f64> {
    eval_u(ans, &s.x, &s.mom, s.t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::linalg::vector;
    use crate::lq_model::{solve_master_mfc, solve_master_mfg, LQParams, Perturbation};
    use crate::riccati::TimeGrid;

    const MASSES: [f64; 3] = [0.5, 1.0, 2.0];

    fn solve(kind: Kind, p: &LQParams, steps: usize) -> MasterAnsatz {
        let grid = TimeGrid::horizon(p.horizon, steps).unwrap();
        match kind {
            Kind::Mfc => solve_master_mfc(p, &grid, &MASSES).unwrap(),
            Kind::Mfg => solve_master_mfg(p, &grid, &MASSES).unwrap(),
        }
    }

    fn res(ans: &MasterAnsatz, samples: &[Sample]) -> ResidualReport {
        match ans.kind() {
            Kind::Mfc => residual_mfc(ans, samples).unwrap(),
            Kind::Mfg => residual_mfg(ans, samples).unwrap(),
        }
    }

    #[test]
    fn zero_costs_give_zero_residual() {
        let p = LQParams::zeros(2, 2, 1.0);
        for kind in [Kind::Mfc, Kind::Mfg] {
            let ans = solve(kind, &p, 100);
            let samples = random_samples(2, 20, &MASSES, 1.0, 2.0, 1);
            assert_eq!(res(&ans, &samples).max_abs, 0.0);
        }
    }

    #[test]
    fn residual_small_on_coupled_instances() {
        for p in [fixtures::lq_scalar_benchmark(), fixtures::lq_coupled_1d(), fixtures::lq_coupled_2d()] {
            for kind in [Kind::Mfc, Kind::Mfg] {
                let ans = solve(kind, &p, 2000);
                let samples = random_samples(p.n(), 40, &MASSES, p.horizon, 2.0, 7);
                let r = res(&ans, &samples);
                assert!(r.max_abs < 1e-6, "{} residual {}", kind.name(), r.max_abs);
                // the check is not vacuous: individual terms are O(1)
                let biggest = r.terms.iter().map(|t| t.hamiltonian.abs()).fold(0.0, f64::max);
                assert!(biggest > 0.1);
            }
        }
    }

    #[test]
    fn perturbations_are_detected() {
        let p = fixtures::lq_coupled_2d();
        for kind in [Kind::Mfc, Kind::Mfg] {
            let ans = solve(kind, &p, 1000);
            let samples = random_samples(2, 50, &MASSES, 1.0, 2.0, 3);
            for pert in [
                Perturbation { p: 1.01, ..Default::default() },
                Perturbation { sigma: 1.01, ..Default::default() },
                Perturbation { gamma: 1.01, ..Default::default() },
            ] {
                let r = res(&ans.perturbed(pert), &samples);
                assert!(r.max_abs > 1e-3, "{pert:?} -> {}", r.max_abs);
            }
        }
    }

    #[test]
    fn kind_mismatch() {
        let p = fixtures::lq_coupled_1d();
        let mfg = solve(Kind::Mfg, &p, 50);
        let mfc = solve(Kind::Mfc, &p, 50);
        assert!(residual_mfc(&mfg, &[]).is_err());
        assert!(residual_mfg(&mfc, &[]).is_err());
        let mom = MeasureMoments::zero(1);
        assert!(gateaux_check_v(&mfg, &mom, &mom, 0.5).is_err());
    }

    #[test]
    fn bundle_matches_finite_differences() {
        let p = fixtures::lq_coupled_2d();
        for kind in [Kind::Mfc, Kind::Mfg] {
            let ans = solve(kind, &p, 1000);
            for s in random_samples(2, 5, &MASSES, 1.0, 2.0, 11) {
                let b = analytic_derivatives(&ans, &s.x, &s.mom, s.t).unwrap();
                let u = |x: &Vector, mom: &MeasureMoments| eval_u(&ans, x, mom, s.t).unwrap();
                let h = 1e-4;
                for i in 0..2 {
                    let e = Vector::from_fn(2, |k, _| if k == i { h } else { 0.0 });
                    let fd = (u(&(&s.x + &e), &s.mom) - u(&(&s.x - &e), &s.mom)) / (2.0 * h);
                    assert!((fd - b.du[i]).abs() < 1e-5);
                    // ∂U/∂m(ξ) tested by moving a Dirac mass of weight ε at ξ = e_i
                    let eps = 1e-4;
                    let unit = Vector::from_fn(2, |k, _| if k == i { 1.0 } else { 0.0 });
                    let dirac = MeasureMoments { m1: 1.0, y: unit.clone(), m2: &unit * unit.transpose() };
                    let zero_dirac = MeasureMoments { m1: 1.0, y: Vector::zeros(2), m2: Mat::zeros(2, 2) };
                    let gd = |d: &MeasureMoments| {
                        (u(&s.x, &s.mom.shifted(d, eps)) - u(&s.x, &s.mom.shifted(d, -eps))) / (2.0 * eps)
                    };
                    let at_zero = gd(&zero_dirac);
                    assert!((at_zero - b.dudm_const).abs() < 1e-5, "{at_zero} {}", b.dudm_const);
                    assert!((gd(&dirac) - at_zero - b.dudm_linear[i]).abs() < 1e-5);
                    for j in 0..2 {
                        let e2 = Vector::from_fn(2, |k, _| if k == j { h } else { 0.0 });
                        let fd2 = (u(&(&s.x + &e + &e2), &s.mom) - u(&(&s.x + &e - &e2), &s.mom)
                            - u(&(&s.x - &e + &e2), &s.mom)
                            + u(&(&s.x - &e - &e2), &s.mom))
                            / (4.0 * h * h);
                        assert!((fd2 - b.d2u[(i, j)]).abs() < 1e-5);
                    }
                }
                // second measure derivative: the bilinear kernel is the
                // cross-difference of U in the first moment
                for i in 0..2 {
                    for j in 0..2 {
                        let h = 1e-3;
                        let dy = |a: f64, c: f64| {
                            let mut y = s.mom.y.clone();
                            y[i] += a;
                            y[j] += c;
                            eval_u(&ans, &s.x, &MeasureMoments { y, ..s.mom.clone() }, s.t).unwrap()
                        };
                        let fd = (dy(h, h) - dy(h, -h) - dy(-h, h) + dy(-h, -h)) / (4.0 * h * h);
                        assert!((fd - b.d2udm2_bilinear[(i, j)]).abs() < 1e-5);
                    }
                }
                assert!((b.trace_gamma - b.d2udm2_bilinear.trace()).abs() == 0.0);
            }
        }
    }

    #[test]
    fn unit_probe_gives_column_of_p() {
        let p = fixtures::lq_coupled_2d();
        let ans = solve(Kind::Mfc, &p, 200);
        let mom = MeasureMoments { m1: 1.0, y: Vector::zeros(2), m2: Mat::identity(2, 2) };
        let b = analytic_derivatives(&ans, &vector(&[1.0, 0.0]), &mom, 0.3).unwrap();
        assert!((b.du - ans.p_at(0.3).unwrap().column(0)).amax() == 0.0);
        let zero = solve(Kind::Mfc, &LQParams::zeros(2, 2, 1.0), 50);
        let b = analytic_derivatives(&zero, &vector(&[1.0, 2.0]), &mom, 0.3).unwrap();
        assert_eq!(b.du.amax() + b.d2u.amax() + b.dudm_linear.amax() + b.dudm_const.abs(), 0.0);
    }

    #[test]
    fn symmetry_defect_cases() {
        let p = fixtures::lq_coupled_2d();
        let mom = MeasureMoments::gaussian(1.0, &vector(&[0.2, 0.1]), &Mat::identity(2, 2));
        let mfc = solve(Kind::Mfc, &p, 500);
        let mfg = solve(Kind::Mfg, &p, 500);
        for t in [0.0, 0.5, 0.9] {
            assert!(symmetry_defect(&mfc, &mom, t).unwrap() <= 1e-10);
        }
        assert!(symmetry_defect(&mfg, &mom, 0.5).unwrap() > 1e-3);
        let mut dec = p.clone();
        dec.q_bar = Mat::zeros(2, 2);
        dec.q_bar_t = Mat::zeros(2, 2);
        dec.a_bar = Mat::zeros(2, 2);
        let mfg0 = solve(Kind::Mfg, &dec, 200);
        assert_eq!(symmetry_defect(&mfg0, &mom, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn gamma_is_mass_derivative_of_sigma_only_for_control() {
        let p = fixtures::lq_coupled_2d();
        for m1 in [0.5, 1.0, 2.0] {
            assert!(gamma_mass_fd_defect(&solve(Kind::Mfc, &p, 400), m1).unwrap() <= 1e-6);
        }
        assert!(gamma_mass_fd_defect(&solve(Kind::Mfg, &p, 400), 1.0).unwrap() > 1e-3);
    }

    #[test]
    fn gateaux_checks() {
        let p = fixtures::lq_scalar_benchmark();
        let ans = solve(Kind::Mfc, &p, 2000);
        let mom = MeasureMoments::gaussian(1.0, &vector(&[0.3]), &Mat::from_element(1, 1, 0.5));
        let zero = MeasureMoments::zero(1);
        assert!(gateaux_check_v(&ans, &mom, &zero, 0.4).unwrap() < 1e-12);
        let dir = MeasureMoments { m1: 0.1, y: vector(&[0.05]), m2: Mat::from_element(1, 1, 0.1) };
        assert!(gateaux_check_v(&ans, &mom, &dir, 0.4).unwrap() <= 1e-6);
        let coupled = solve(Kind::Mfc, &fixtures::lq_coupled_2d(), 2000);
        let mom2 = MeasureMoments::gaussian(1.0, &vector(&[0.3, -0.2]), &Mat::identity(2, 2));
        let dir2 = MeasureMoments::gaussian(0.2, &vector(&[1.0, 0.5]), &Mat::identity(2, 2));
        assert!(gateaux_check_v(&coupled, &mom2, &dir2, 0.25).unwrap() <= 1e-6);
        let z = solve(Kind::Mfc, &LQParams::zeros(1, 1, 1.0), 50);
        assert_eq!(gateaux_check_v(&z, &mom, &dir, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn mfc_and_mfg_agree_without_coupling() {
        let mut p = fixtures::lq_coupled_2d();
        p.q_bar = Mat::zeros(2, 2);
        p.q_bar_t = Mat::zeros(2, 2);
        p.a_bar = Mat::zeros(2, 2);
        let samples = random_samples(2, 20, &MASSES, 1.0, 2.0, 5);
        let a = res(&solve(Kind::Mfc, &p, 300), &samples);
        let b = res(&solve(Kind::Mfg, &p, 300), &samples);
        assert_eq!(a.residuals, b.residuals);
    }

    #[test]
    fn report_table_shape() {
        let p = fixtures::lq_coupled_2d();
        let ans = solve(Kind::Mfg, &p, 100);
        let samples = random_samples(2, 4, &MASSES, 1.0, 2.0, 5);
        let r = res(&ans, &samples);
        let t = r.to_table();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.header.len(), 1 + 2 + 1 + 2 + 1 + 8);
        assert_eq!(t.column("residual").unwrap(), r.residuals);
    }
}
