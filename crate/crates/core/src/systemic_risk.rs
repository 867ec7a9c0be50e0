//! Interbank lending model with common noise.
//!
//! Bank `i` has log-reserve `xⁱ`, lends towards the average at rate `α` and
//! controls `vⁱ`:
//!
//! ```text
//! dxⁱ = [α(y − xⁱ) + vⁱ] dt + σ dwⁱ + β db
//! f = ½v² − λ v (y − x) + ½μ (y − x)²,     h = ½c (y − x)²
//! ```
//!
//! The Master equation is solved by `U(x,m,t) = ½(x − y)²P(t) + R(m₁,t)` with
//! `dP/dt = 2(α+λ)P + P² − (μ − λ²)`, `P(T) = c` and
//! `R(m₁,t) = ½(σ² + β²(m₁ − 1)²) ∫_t^T P(s) ds`.
//! On measures of mass `m₁ ≠ 1` the ansatz leaves the defect
//! `(x − y) y P (α + λ + P)(m₁ − 1)`; see [`mass_defect`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::Mat;
use crate::master_residual::{ResidualReport, ResidualTerms, Sample};
use crate::riccati::{integrate_backward, tail_integrals, AffineQuadraticField, RiccatiSolution, ScalarSeries, TimeGrid};
use crate::rng::{substream, substream_seed, COMMON_LANE};
use crate::table::Table;

use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SystemicParams {
    pub alpha: f64,
    pub lambda: f64,
    pub mu: f64,
    pub c: f64,
    pub sigma: f64,
    pub beta: f64,
    pub horizon: f64,
}

impl SystemicParams {
    /// `μ = λ²` is accepted: it is the degenerate case with `P ≡ 0` when `c = 0`.
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.lambda, self.mu, self.c, self.sigma, self.beta, self.horizon];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::params("non-finite systemic parameter"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::params("alpha must be > 0"));
        }
        if self.mu < self.lambda * self.lambda {
            return Err(Error::params("mu - lambda^2 must be >= 0"));
        }
        if self.c < 0.0 || self.sigma < 0.0 || self.beta < 0.0 {
            return Err(Error::params("c, sigma and beta must be >= 0"));
        }
        if self.horizon <= 0.0 {
            return Err(Error::params("horizon must be > 0"));
        }
        Ok(())
    }

    /// Stationary point `−(α+λ) + √((α+λ)² + μ − λ²)` of the `P` flow.
    pub fn fixed_point(&self) -> f64 {
        let s = self.alpha + self.lambda;
        -s + (s * s + self.mu - self.lambda * self.lambda).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct SystemicSolution {
    params: SystemicParams,
    p: RiccatiSolution,
    /// `∫_t^T P(s) ds`.
    tail: ScalarSeries,
    p_scale: f64,
}

pub fn solve_systemic(params: &SystemicParams, grid: &TimeGrid) -> Result<SystemicSolution> {
    params.validate()?;
    let one = |v: f64| Mat::from_element(1, 1, v);
    let drift = one(-(params.alpha + params.lambda));
    let field = AffineQuadraticField::new(drift.clone(), drift, one(1.0), one(params.mu - params.lambda * params.lambda))?;
    let p = integrate_backward(&field, &one(params.c), grid)?;
    let tail = tail_integrals(&|s| p.eval_at(s).map(|m| m[(0, 0)]).unwrap_or(f64::NAN), grid);
    Ok(SystemicSolution {
        params: *params,
        p,
        tail,
        p_scale: 1.0,
    })
}

impl SystemicSolution {
    pub fn params(&self) -> &SystemicParams {
        &self.params
    }

    pub fn grid(&self) -> &TimeGrid {
        self.p.grid()
    }

    pub fn p_solution(&self) -> &RiccatiSolution {
        &self.p
    }

    /// Copy with `P` scaled by `factor` on evaluation.
    pub fn perturbed(&self, factor: f64) -> Self {
        Self {
            p_scale: factor,
            ..self.clone()
        }
    }

    pub fn p_at(&self, t: f64) -> Result<f64> {
        Ok(self.p.eval_at(t)?[(0, 0)] * self.p_scale)
    }

    pub fn p_dot(&self, t: f64) -> Result<f64> {
        Ok(self.p.derivative_at(t)?[(0, 0)] * self.p_scale)
    }

    fn noise_weight(&self, m1: f64) -> f64 {
        let p = &self.params;
        0.5 * (p.sigma * p.sigma + p.beta * p.beta * (m1 - 1.0).powi(2))
    }

    pub fn r_at(&self, m1: f64, t: f64) -> Result<f64> {
        Ok(self.noise_weight(m1) * self.tail.eval_at(t)? * self.p_scale)
    }

    pub fn r_dot(&self, m1: f64, t: f64) -> Result<f64> {
        Ok(self.noise_weight(m1) * self.tail.derivative_at(t)? * self.p_scale)
    }

    /// `∂R/∂m₁`.
    pub fn r_mass(&self, m1: f64, t: f64) -> Result<f64> {
        let b2 = self.params.beta * self.params.beta;
        Ok(b2 * (m1 - 1.0) * self.tail.eval_at(t)? * self.p_scale)
    }

    /// `∂²R/∂m₁²`.
    pub fn r_mass2(&self, t: f64) -> Result<f64> {
        Ok(self.params.beta * self.params.beta * self.tail.eval_at(t)? * self.p_scale)
    }
}

/// `U(x,m,t) = ½(x − y)²P(t) + R(m₁,t)`.
pub fn eval_u_systemic(sol: &SystemicSolution, x: f64, m1: f64, y: f64, t: f64) -> Result<f64> {
    Ok(0.5 * (x - y).powi(2) * sol.p_at(t)? + sol.r_at(m1, t)?)
}

/// `v̂ = (λ + P(t))(y − x)`.
pub fn equilibrium_feedback(sol: &SystemicSolution, x: f64, y: f64, t: f64) -> Result<f64> {
    Ok((sol.params.lambda + sol.p_at(t)?) * (y - x))
}

/// `H(x,m,q) = ½μ(y−x)² + αq(y−x) − ½(q − λ(y−x))²`.
pub fn hamiltonian_systemic(p: &SystemicParams, x: f64, y: f64, q: f64) -> f64 {
    let d = y - x;
    0.5 * p.mu * d * d + p.alpha * q * d - 0.5 * (q - p.lambda * d).powi(2)
}

/// Optimal drift `G = (α + λ)(y − x) − q`.
pub fn drift_systemic(p: &SystemicParams, x: f64, y: f64, q: f64) -> f64 {
    (p.alpha + p.lambda) * (y - x) - q
}

fn residual_terms(sol: &SystemicSolution, s: &Sample) -> Result<ResidualTerms> {
    let p = &sol.params;
    let (x, m1, y, t) = (s.x[0], s.mom.m1, s.mom.y[0], s.t);
    let pt = sol.p_at(t)?;
    let u_x = (x - y) * pt;
    // ∂U/∂m(ξ) = −(x − y)P ξ + ∂R/∂m₁, so D_ξ ∂U/∂m = −(x − y)P
    let d_xi = -(x - y) * pt;
    // ∫ G(ξ, m, U_ξ(ξ)) m(dξ) with U_ξ(ξ) = (ξ − y)P, affine in ξ
    let g = |xi: f64| drift_systemic(p, xi, y, (xi - y) * pt);
    let flow = g(y) - g(0.0) + m1 * g(0.0);
    let b2 = p.beta * p.beta;
    Ok(ResidualTerms {
        time: -(0.5 * (x - y).powi(2) * sol.p_dot(t)? + sol.r_dot(m1, t)?),
        diffusion: -0.5 * p.sigma * p.sigma * pt,
        common_laplacian: -0.5 * b2 * pt,
        measure_flow: -d_xi * flow,
        // D_x D_ξ ∂U/∂m = −P;  D_ξ D_η ∂²U/∂m² = P
        common_cross: b2 * pt * m1,
        common_second_order: -0.5 * b2 * pt * m1 * m1,
        hamiltonian: -hamiltonian_systemic(p, x, y, u_x),
        mean_hamiltonian: 0.0,
    })
}

/// Master equation residual of the ansatz at every sample (`n = 1`).
pub fn residual_systemic(sol: &SystemicSolution, samples: &[Sample]) -> Result<ResidualReport> {
    if samples.iter().any(|s| s.x.len() != 1 || s.mom.y.len() != 1) {
        return Err(Error::dims("systemic samples are one-dimensional"));
    }
    let terms = Exec::Parallel
        .map(samples.len(), |i| residual_terms(sol, &samples[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let residuals: Vec<f64> = terms.iter().map(ResidualTerms::total).collect();
    let max_abs = residuals.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    Ok(ResidualReport {
        samples: samples.to_vec(),
        residuals,
        terms,
        max_abs,
    })
}

/// Residual left by the ansatz on a measure of mass `m₁`:
/// `(x − y) y P (α + λ + P)(m₁ − 1)`.
pub fn mass_defect(sol: &SystemicSolution, s: &Sample) -> Result<f64> {
    let p = &sol.params;
    let (x, m1, y) = (s.x[0], s.mom.m1, s.mom.y[0]);
    let pt = sol.p_at(s.t)?;
    Ok((x - y) * y * pt * (p.alpha + p.lambda + pt) * (m1 - 1.0))
}

/// The diffusion coefficient of the common-noise term in the backward
/// equation for `u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BTerm {
    /// `−∫ D_ξ ∂U/∂m(ξ) m(dξ) = (x − y) P m₁`.
    pub from_definition: f64,
    /// `x − y`.
    pub without_p_factor: f64,
}

pub fn b_term(sol: &SystemicSolution, x: f64, m1: f64, y: f64, t: f64) -> Result<BTerm> {
    let d_xi = -(x - y) * sol.p_at(t)?;
    Ok(BTerm {
        from_definition: -d_xi * m1,
        without_p_factor: x - y,
    })
}

/// `u(x,t) = ½(x − y(t))²P(t) + ½σ² ∫_t^T P` along a given conditional mean.
pub fn u_along_path(sol: &SystemicSolution, x: f64, y_t: f64, t: f64) -> Result<f64> {
    let s2 = sol.params.sigma * sol.params.sigma;
    Ok(0.5 * (x - y_t).powi(2) * sol.p_at(t)? + 0.5 * s2 * sol.tail.eval_at(t)? * sol.p_scale)
}

/// Summary of one bank simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct BankRun {
    /// Ensemble mean `x̄(t_k)`.
    pub means: Vec<f64>,
    /// `y₀ + β b(t_k)` on the same common path.
    pub reference: Vec<f64>,
    /// Empirical variance of `xⁱ − x̄`.
    pub spread_variance: Vec<f64>,
    pub last: Vec<f64>,
}

impl BankRun {
    pub fn to_table(&self, grid: &TimeGrid) -> Table {
        let mut t = Table::new(["t", "xbar", "y_ref", "spread_var"]);
        for k in 0..self.means.len() {
            t.push(vec![grid.node(k), self.means[k], self.reference[k], self.spread_variance[k]])
                .expect("four columns");
        }
        t
    }
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Euler–Maruyama for `N` banks under the equilibrium feedback, with the
/// ensemble mean standing in for `y`.
pub fn simulate_banks(sol: &SystemicSolution, x0: &[f64], seed: u64, replication: u64, exec: Exec) -> Result<BankRun> {
    if x0.len() < 2 {
        return Err(Error::params("at least two banks are required"));
    }
    let p = &sol.params;
    let grid = *sol.grid();
    let h = grid.step();
    let sqrt_h = h.sqrt();
    let mut common = substream(seed, replication, COMMON_LANE);
    let mut banks: Vec<(f64, ChaCha8Rng)> = x0
        .iter()
        .enumerate()
        .map(|(j, x)| (*x, ChaCha8Rng::seed_from_u64(substream_seed(seed, replication, j as u64))))
        .collect();
    let states = |b: &[(f64, ChaCha8Rng)]| b.iter().map(|(x, _)| *x).collect::<Vec<_>>();
    let (y0, var0) = mean_and_variance(x0);
    let mut means = vec![y0];
    let mut reference = vec![y0];
    let mut spread = vec![var0];
    let mut x_bar = y0;
    let mut b = 0.0;
    for k in 0..grid.num_steps() {
        let t = grid.node(k);
        let gain = p.alpha + p.lambda + sol.p_at(t)?;
        let db = std_normal(&mut common) * sqrt_h;
        b += db;
        exec.for_each_mut(&mut banks, |_, (x, rng)| {
            let dw = std_normal(rng) * sqrt_h;
            *x += gain * (x_bar - *x) * h + p.sigma * dw + p.beta * db;
        });
        let (m, v) = mean_and_variance(&states(&banks));
        x_bar = m;
        means.push(m);
        reference.push(y0 + p.beta * b);
        spread.push(v);
    }
    Ok(BankRun {
        means,
        reference,
        spread_variance: spread,
        last: states(&banks),
    })
}

/// `|x̄(T) − y(T)|²` over independent replications.
pub fn mean_deviation_samples(sol: &SystemicSolution, x0: &[f64], seed: u64, replications: usize, exec: Exec) -> Result<Vec<f64>> {
    exec.map(replications, |rep| {
        // banks inside a replication run sequentially; replications carry the parallelism
        let run = simulate_banks(sol, x0, seed, rep as u64, Exec::Sequential)?;
        let d = run.means.last().unwrap() - run.reference.last().unwrap();
        Ok(d * d)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::vector;
    use crate::lq_model::MeasureMoments;
    use crate::master_residual::random_samples;
    use crate::mckean_vlasov::Estimate;

    fn base() -> SystemicParams {
        SystemicParams { alpha: 1.0, lambda: 0.5, mu: 1.0, c: 0.0, sigma: 0.2, beta: 0.3, horizon: 1.0 }
    }

    fn grid(steps: usize) -> TimeGrid {
        TimeGrid::horizon(1.0, steps).unwrap()
    }

    #[test]
    fn fixed_point_value() {
        let p = base();
        assert!((p.fixed_point() - (-1.5 + 3f64.sqrt())).abs() < 1e-15);
        assert!((p.fixed_point() - 0.23205081).abs() < 1e-8);
    }

    #[test]
    fn fixed_point_terminal_is_stationary() {
        let mut p = base();
        p.c = p.fixed_point();
        let sol = solve_systemic(&p, &grid(1000)).unwrap();
        let dev = sol.p_solution().values().iter().map(|m| (m[(0, 0)] - p.c).abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-10, "{dev}");
        let expected = 0.5 * 0.04 * p.c;
        assert!((sol.r_at(1.0, 0.0).unwrap() - expected).abs() < 1e-8);
        assert_eq!(sol.r_at(1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn p_stays_between_terminal_and_fixed_point() {
        for c in [0.0, 0.1, 2.0] {
            let p = SystemicParams { c, ..base() };
            let sol = solve_systemic(&p, &grid(500)).unwrap();
            let (lo, hi) = (c.min(p.fixed_point()), c.max(p.fixed_point()));
            assert!(sol.p_solution().values().iter().all(|m| m[(0, 0)] >= lo - 1e-12 && m[(0, 0)] <= hi + 1e-12));
            assert_eq!(sol.p_solution().terminal()[(0, 0)], c);
        }
    }

    #[test]
    fn value_and_feedback_examples() {
        let p = SystemicParams { c: 0.7, ..base() };
        let sol = solve_systemic(&p, &grid(500)).unwrap();
        assert_eq!(eval_u_systemic(&sol, 0.4, 1.3, 0.4, 0.2).unwrap(), sol.r_at(1.3, 0.2).unwrap());
        assert!((eval_u_systemic(&sol, 1.0, 1.0, -0.5, 1.0).unwrap() - 0.5 * 0.7 * 2.25).abs() < 1e-15);
        assert_eq!(equilibrium_feedback(&sol, 0.3, 0.3, 0.5).unwrap(), 0.0);
        // grid minimisation of ½v² − λv(y−x) + q(α(y−x) + v)
        let (x, y, t) = (0.2, 1.1, 0.4);
        let q = (x - y) * sol.p_at(t).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=400_000 {
            let v = -5.0 + 10.0 * i as f64 / 400_000.0;
            let val = 0.5 * v * v - p.lambda * v * (y - x) + q * (p.alpha * (y - x) + v);
            if val < best.0 {
                best = (val, v);
            }
        }
        assert!((equilibrium_feedback(&sol, x, y, t).unwrap() - best.1).abs() < 1e-4);
        assert!((hamiltonian_systemic(&p, x, y, q) - (best.0 + 0.5 * p.mu * (y - x).powi(2))).abs() < 1e-8);

        let mut pf = base();
        pf.c = pf.fixed_point();
        let solf = solve_systemic(&pf, &grid(100)).unwrap();
        assert!((equilibrium_feedback(&solf, 0.0, 1.0, 0.3).unwrap() - (pf.lambda + pf.c)).abs() < 1e-12);
    }

    fn unit_mass_samples(count: usize, seed: u64) -> Vec<Sample> {
        random_samples(1, count, &[1.0], 1.0, 2.0, seed)
    }

    #[test]
    fn residual_vanishes_at_unit_mass() {
        let p = SystemicParams { c: 0.8, ..base() };
        let sol = solve_systemic(&p, &grid(2000)).unwrap();
        let r = residual_systemic(&sol, &unit_mass_samples(100, 1)).unwrap();
        assert!(r.max_abs <= 1e-6, "{}", r.max_abs);
        let bad = residual_systemic(&sol.perturbed(1.01), &unit_mass_samples(100, 1)).unwrap();
        assert!(bad.max_abs > 1e-3);
    }

    #[test]
    fn residual_off_unit_mass_is_the_predicted_defect() {
        let p = SystemicParams { c: 0.8, ..base() };
        let sol = solve_systemic(&p, &grid(2000)).unwrap();
        let samples = random_samples(1, 100, &[0.5, 1.0, 2.0], 1.0, 2.0, 2);
        let r = residual_systemic(&sol, &samples).unwrap();
        for (s, res) in samples.iter().zip(&r.residuals) {
            assert!((res - mass_defect(&sol, s).unwrap()).abs() <= 1e-6);
        }
        assert!(samples.iter().any(|s| mass_defect(&sol, s).unwrap().abs() > 1e-2));
    }

    #[test]
    fn degenerate_zero_solution() {
        let p = SystemicParams { mu: 0.25, lambda: 0.5, c: 0.0, ..base() };
        let sol = solve_systemic(&p, &grid(200)).unwrap();
        assert!(sol.p_solution().values().iter().all(|m| m[(0, 0)] == 0.0));
        let samples = random_samples(1, 20, &[0.5, 1.0, 2.0], 1.0, 2.0, 3);
        assert_eq!(residual_systemic(&sol, &samples).unwrap().max_abs, 0.0);
        assert!(solve_systemic(&SystemicParams { mu: 0.2, ..p }, &grid(10)).is_err());
    }

    #[test]
    fn b_term_reports_both_readings() {
        let p = SystemicParams { c: 0.8, ..base() };
        let sol = solve_systemic(&p, &grid(200)).unwrap();
        let b = b_term(&sol, 1.5, 1.0, 0.5, 0.3).unwrap();
        assert!((b.from_definition - sol.p_at(0.3).unwrap()).abs() < 1e-15);
        assert_eq!(b.without_p_factor, 1.0);
    }

    #[test]
    fn u_along_path_matches_master_value() {
        let p = SystemicParams { c: 0.4, ..base() };
        let sol = solve_systemic(&p, &grid(300)).unwrap();
        let x0 = vec![0.0; 4];
        let run = simulate_banks(&sol, &x0, 5, 0, Exec::Sequential).unwrap();
        for k in (0..=300).step_by(30) {
            let t = sol.grid().node(k);
            let y = run.reference[k];
            let mom = MeasureMoments { m1: 1.0, y: vector(&[y]), m2: Mat::from_element(1, 1, y * y) };
            let lhs = u_along_path(&sol, 0.7, y, t).unwrap();
            let rhs = eval_u_systemic(&sol, 0.7, mom.m1, mom.y[0], t).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10);
        }
    }

    #[test]
    fn consensus_without_idiosyncratic_noise() {
        let p = SystemicParams { sigma: 0.0, c: 0.3, ..base() };
        let sol = solve_systemic(&p, &grid(500)).unwrap();
        let run = simulate_banks(&sol, &[0.25; 8], 9, 0, Exec::Parallel).unwrap();
        assert!(run.last.iter().all(|x| *x == run.last[0]));
        for (m, r) in run.means.iter().zip(&run.reference) {
            assert!((m - r).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_deviation_variance() {
        let p = SystemicParams { c: 0.3, sigma: 0.5, ..base() };
        let sol = solve_systemic(&p, &grid(50)).unwrap();
        let n = 500;
        let x0: Vec<f64> = (0..n).map(|j| (j as f64 / n as f64) - 0.5).collect();
        let est = Estimate::from_samples(&mean_deviation_samples(&sol, &x0, 4, 200, Exec::Parallel).unwrap());
        let expected = p.sigma * p.sigma / n as f64;
        assert!((est.mean - expected).abs() < 3.0 * est.std_err, "{} vs {expected} ± {}", est.mean, est.std_err);
    }

    #[test]
    fn spread_contracts_with_stronger_reversion() {
        let x0: Vec<f64> = (0..200).map(|j| (j as f64 / 100.0) - 1.0).collect();
        let ends: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|alpha| {
                let p = SystemicParams { alpha: *alpha, c: 0.3, ..base() };
                let sol = solve_systemic(&p, &grid(200)).unwrap();
                let runs: Vec<f64> = (0..20)
                    .map(|rep| *simulate_banks(&sol, &x0, 6, rep, Exec::Parallel).unwrap().spread_variance.last().unwrap())
                    .collect();
                runs.iter().sum::<f64>() / runs.len() as f64
            })
            .collect();
        assert!(ends[0] > ends[1] && ends[1] > ends[2], "{ends:?}");
    }

    #[test]
    fn banks_are_deterministic_across_exec_modes() {
        let p = SystemicParams { c: 0.3, ..base() };
        let sol = solve_systemic(&p, &grid(100)).unwrap();
        let x0: Vec<f64> = (0..64).map(|j| j as f64 * 0.01).collect();
        assert_eq!(
            simulate_banks(&sol, &x0, 1, 2, Exec::Sequential).unwrap(),
            simulate_banks(&sol, &x0, 1, 2, Exec::Parallel).unwrap()
        );
    }
}
