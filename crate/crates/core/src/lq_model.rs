//! Linear-quadratic model data and the closed-form quadratic solutions of the
//! Bellman and Master equations.
//!
//! Running cost, dynamics and terminal cost:
//!
//! ```text
//! f(x,m,v) = ½[xᵀQx + vᵀRv + (x − Sy)ᵀQ̄(x − Sy)]
//! g(x,m,v) = Ax + Āy + Bv
//! h(x,m)   = ½[xᵀQ_T x + (x − S_T y)ᵀQ̄_T(x − S_T y)]
//! ```
//!
//! where `y = ∫ξ m(ξ)dξ`. A measure enters every formula only through its
//! mass `m₁`, first moment `y` and second moment `M₂`, so measures are carried
//! as [`MeasureMoments`].
//!
//! The value functions are quadratic:
//!
//! ```text
//! V(m,t)   = ½ tr(P M₂) + ½ yᵀΣ(t,m₁)y + λ(t,m₁)                  (control)
//! U(x,m,t) = ½ xᵀPx + yᵀΣx + ½ yᵀΓy + μ(t,m₁)                      (control)
//! U(x,m,t) = ½ xᵀPx + xᵀΣy + ½ yᵀΓy + μ(t,m₁)                      (game)
//! ```
//!
//! with `P`, `Σ`, `Γ` solving backward Riccati flows and `λ`, `μ` tail
//! integrals of trace terms.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{is_positive_definite, is_psd, is_symmetric, symmetrize_in_place, Mat, Vector};
use crate::riccati::{
    integrate_backward, tail_integrals, AffineQuadraticField, RiccatiField, RiccatiSolution,
    ScalarSeries, TimeGrid,
};

/// All matrices of the LQ problem.
#[derive(Clone, Debug, PartialEq)]
pub struct LQParams {
    pub a: Mat,
    pub a_bar: Mat,
    pub b: Mat,
    pub q: Mat,
    pub q_bar: Mat,
    pub q_t: Mat,
    pub q_bar_t: Mat,
    pub s: Mat,
    pub s_t: Mat,
    pub r: Mat,
    /// Constant diffusion matrix of the idiosyncratic noise.
    pub sigma: Mat,
    /// Common-noise intensity.
    pub beta: f64,
    pub horizon: f64,
}

impl LQParams {
    /// Problem with every cost and drift matrix zero, `B = I`, `R = I`.
    pub fn zeros(n: usize, d: usize, horizon: f64) -> Self {
        let z = Mat::zeros(n, n);
        Self {
            a: z.clone(),
            a_bar: z.clone(),
            b: Mat::identity(n, d),
            q: z.clone(),
            q_bar: z.clone(),
            q_t: z.clone(),
            q_bar_t: z.clone(),
            s: z.clone(),
            s_t: z.clone(),
            r: Mat::identity(d, d),
            sigma: z,
            beta: 0.0,
            horizon,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let d = self.d();
        let square = [
            ("A", &self.a),
            ("A_bar", &self.a_bar),
            ("Q", &self.q),
            ("Q_bar", &self.q_bar),
            ("Q_T", &self.q_t),
            ("Q_bar_T", &self.q_bar_t),
            ("S", &self.s),
            ("S_T", &self.s_t),
            ("sigma", &self.sigma),
        ];
        for (name, m) in square {
            if m.shape() != (n, n) {
                return Err(Error::dims(format!("{name} is {:?}, expected {n}x{n}", m.shape())));
            }
        }
        if self.b.nrows() != n {
            return Err(Error::dims(format!("B is {:?}, expected {n}x{d}", self.b.shape())));
        }
        if self.r.shape() != (d, d) {
            return Err(Error::dims(format!("R is {:?}, expected {d}x{d}", self.r.shape())));
        }
        for (name, m) in [
            ("Q", &self.q),
            ("Q_bar", &self.q_bar),
            ("Q_T", &self.q_t),
            ("Q_bar_T", &self.q_bar_t),
            ("R", &self.r),
        ] {
            if !is_symmetric(m, 1e-12) {
                return Err(Error::params(format!("{name} must be symmetric")));
            }
        }
        if !is_positive_definite(&self.r) {
            return Err(Error::params("R must be positive definite"));
        }
        if !is_psd(&self.diffusion(), 1e-12) {
            return Err(Error::params("sigma sigmaᵀ must be positive semi-definite"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::params("beta must be finite and >= 0"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::params("horizon must be > 0"));
        }
        if self.iter_matrices().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::params("non-finite matrix entry"));
        }
        Ok(())
    }

    fn iter_matrices(&self) -> impl Iterator<Item = &Mat> {
        [
            &self.a,
            &self.a_bar,
            &self.b,
            &self.q,
            &self.q_bar,
            &self.q_t,
            &self.q_bar_t,
            &self.s,
            &self.s_t,
            &self.r,
            &self.sigma,
        ]
        .into_iter()
    }

    pub fn r_inv(&self) -> Mat {
        self.r
            .clone()
            .cholesky()
            .expect("R validated positive definite")
            .inverse()
    }

    /// `K = B R⁻¹ Bᵀ`.
    pub fn control_kernel(&self) -> Mat {
        let mut k = &self.b * self.r_inv() * self.b.transpose();
        symmetrize_in_place(&mut k);
        k
    }

    /// `a = σσᵀ`.
    pub fn diffusion(&self) -> Mat {
        &self.sigma * self.sigma.transpose()
    }

    /// Terminal value of `Σ` for the control problem at mass `m1`.
    pub fn sigma_terminal_mfc(&self, m1: f64) -> Mat {
        let sqs = self.s_t.transpose() * &self.q_bar_t * &self.s_t;
        let qs = &self.q_bar_t * &self.s_t;
        sqs * m1 - (qs.transpose() + qs)
    }

    /// Terminal value of `Σ` for the game.
    pub fn sigma_terminal_mfg(&self) -> Mat {
        -(&self.q_bar_t * &self.s_t)
    }

    /// Terminal value of `Γ` (both kinds).
    pub fn gamma_terminal(&self) -> Mat {
        self.s_t.transpose() * &self.q_bar_t * &self.s_t
    }

    pub fn p_terminal(&self) -> Mat {
        &self.q_t + &self.q_bar_t
    }

    /// True when no mean-field coupling is present (`Q̄ = Q̄_T = Ā = 0`).
    pub fn is_uncoupled(&self) -> bool {
        self.q_bar.iter().all(|v| *v == 0.0)
            && self.q_bar_t.iter().all(|v| *v == 0.0)
            && self.a_bar.iter().all(|v| *v == 0.0)
    }
}

/// Mass, first and second moment of a (not necessarily probability) measure.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureMoments {
    pub m1: f64,
    pub y: Vector,
    pub m2: Mat,
}

impl MeasureMoments {
    pub fn new(m1: f64, y: Vector, m2: Mat) -> Result<Self> {
        let mom = Self { m1, y, m2 };
        mom.validate()?;
        Ok(mom)
    }

    pub fn zero(n: usize) -> Self {
        Self {
            m1: 0.0,
            y: Vector::zeros(n),
            m2: Mat::zeros(n, n),
        }
    }

    /// Moments of `mass · N(mean, cov)`.
    pub fn gaussian(mass: f64, mean: &Vector, cov: &Mat) -> Self {
        Self {
            m1: mass,
            y: mean * mass,
            m2: (cov + mean * mean.transpose()) * mass,
        }
    }

    /// Moments of `weight · Σ_j δ_{points[j]}`.
    pub fn from_points(points: &[Vector], weight: f64) -> Self {
        let n = points.first().map_or(0, |p| p.len());
        let mut y = Vector::zeros(n);
        let mut m2 = Mat::zeros(n, n);
        for p in points {
            y += p;
            m2 += p * p.transpose();
        }
        Self {
            m1: weight * points.len() as f64,
            y: y * weight,
            m2: m2 * weight,
        }
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }

    /// Moments of `m + θ m̃` (moments are linear in the measure).
    pub fn shifted(&self, direction: &MeasureMoments, theta: f64) -> Self {
        Self {
            m1: self.m1 + theta * direction.m1,
            y: &self.y + &direction.y * theta,
            m2: &self.m2 + &direction.m2 * theta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m2.shape() != (self.dim(), self.dim()) {
            return Err(Error::dims("second moment shape does not match first moment"));
        }
        if self.m1.is_nan() || self.m1 < 0.0 {
            return Err(Error::params("total mass must be >= 0"));
        }
        if !is_symmetric(&self.m2, 1e-10) {
            return Err(Error::params("second moment must be symmetric"));
        }
        if self.m1 > 0.0 {
            let centred = &self.m2 - &self.y * self.y.transpose() / self.m1;
            if !is_psd(&centred, 1e-9) {
                return Err(Error::params("M2 - y yᵀ/m1 must be positive semi-definite"));
            }
        }
        Ok(())
    }
}

/// `H(x,m,q) = inf_v f(x,m,v) + q·g(x,m,v)` in closed form.
pub fn hamiltonian(p: &LQParams, x: &Vector, mom: &MeasureMoments, q: &Vector) -> f64 {
    let y = &mom.y;
    let sy = &p.s * y;
    let k = p.control_kernel();
    0.5 * x.dot(&((&p.q + &p.q_bar) * x)) - x.dot(&(&p.q_bar * &sy)) + 0.5 * sy.dot(&(&p.q_bar * &sy))
        - 0.5 * q.dot(&(&k * q))
        + q.dot(&(&p.a * x + &p.a_bar * y))
}

/// Gradient of `H` with respect to the first moment `y`. Since `y` is the only
/// way `H` depends on `m`, `∂H/∂m(ξ)(x) = (∂H/∂y)·x`.
pub fn hamiltonian_mean_gradient(p: &LQParams, x: &Vector, y: &Vector, q: &Vector) -> Vector {
    let st_qbar = p.s.transpose() * &p.q_bar;
    -(&st_qbar * x) + &st_qbar * (&p.s * y) + p.a_bar.transpose() * q
}

/// Minimiser `v̂ = −R⁻¹Bᵀq` of the Hamiltonian.
pub fn optimal_control(p: &LQParams, q: &Vector) -> Vector {
    -(p.r_inv() * p.b.transpose() * q)
}

/// `g(x,m,v) = Ax + Āy + Bv`.
pub fn dynamics(p: &LQParams, x: &Vector, y: &Vector, v: &Vector) -> Vector {
    &p.a * x + &p.a_bar * y + &p.b * v
}

/// `G(x,m,q) = Ax + Āy − BR⁻¹Bᵀq`.
pub fn optimal_drift(p: &LQParams, x: &Vector, mom: &MeasureMoments, q: &Vector) -> Vector {
    &p.a * x + &p.a_bar * &mom.y - p.control_kernel() * q
}

/// Running cost `f(x,m,v)`; `y` is the first moment of `m`.
pub fn running_cost(p: &LQParams, x: &Vector, y: &Vector, v: &Vector) -> f64 {
    let dev = x - &p.s * y;
    0.5 * (x.dot(&(&p.q * x)) + v.dot(&(&p.r * v)) + dev.dot(&(&p.q_bar * &dev)))
}

/// Terminal cost `h(x,m)`.
pub fn terminal_cost(p: &LQParams, x: &Vector, y: &Vector) -> f64 {
    let dev = x - &p.s_t * y;
    0.5 * (x.dot(&(&p.q_t * x)) + dev.dot(&(&p.q_bar_t * &dev)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Mean field type control.
    Mfc,
    /// Mean field game.
    Mfg,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Mfc => "MFC",
            Kind::Mfg => "MFG",
        }
    }
}

/// Precomputed constant matrices shared by the Riccati families.
#[derive(Clone, Debug)]
struct Coefficients {
    a: Mat,
    a_bar: Mat,
    k: Mat,
    q_sum: Mat,
    sqs: Mat,
    qs: Mat,
}

impl Coefficients {
    fn new(p: &LQParams) -> Self {
        Self {
            a: p.a.clone(),
            a_bar: p.a_bar.clone(),
            k: p.control_kernel(),
            q_sum: &p.q + &p.q_bar,
            sqs: p.s.transpose() * &p.q_bar * &p.s,
            qs: &p.q_bar * &p.s,
        }
    }
}

/// Joint flow of `[P | Σ | Γ]` at a fixed mass `m1`, so that every RK stage
/// sees consistent `P` and `Σ` values.
struct FamilyField<'a> {
    kind: Kind,
    c: &'a Coefficients,
    m1: f64,
}

impl FamilyField<'_> {
    fn n(&self) -> usize {
        self.c.a.nrows()
    }
}

impl RiccatiField for FamilyField<'_> {
    fn shape(&self) -> (usize, usize) {
        (self.n(), 3 * self.n())
    }

    fn rhs(&self, _t: f64, x: &Mat) -> Mat {
        let n = self.n();
        let c = self.c;
        let m1 = self.m1;
        let p = x.view((0, 0), (n, n));
        let sig = x.view((0, n), (n, n));
        let gam = x.view((0, 2 * n), (n, n));

        let pk = p * &c.k;
        let dp = -(p * &c.a + c.a.transpose() * p - &pk * p + &c.q_sum);

        let m0 = &c.a + &c.a_bar * m1 - &c.k * p;
        let sks = sig.transpose() * &c.k * sig;
        let ds = match self.kind {
            Kind::Mfc => -(sig * &m0 + m0.transpose() * sig - sig * &c.k * sig * m1 + &c.sqs * m1
                - &c.qs
                - c.qs.transpose()
                + p * &c.a_bar
                + c.a_bar.transpose() * p),
            Kind::Mfg => -(sig * &m0 + (c.a.transpose() - &pk) * sig - sig * &c.k * sig * m1 - &c.qs
                + p * &c.a_bar),
        };

        let m_1 = &c.a + &c.a_bar * m1 - &c.k * (p + sig * m1);
        // Σᵀ on the quadratic and Ā terms: identical for symmetric Σ, and the
        // form that keeps Γ symmetric when Σ is not.
        let sa = sig.transpose() * &c.a_bar;
        let dg = -(gam * &m_1 + m_1.transpose() * gam + &c.sqs - sks + &sa + sa.transpose());

        let mut out = Mat::zeros(n, 3 * n);
        out.view_mut((0, 0), (n, n)).copy_from(&dp);
        out.view_mut((0, n), (n, n)).copy_from(&ds);
        out.view_mut((0, 2 * n), (n, n)).copy_from(&dg);
        out
    }

    fn project(&self, x: &mut Mat) {
        let n = self.n();
        let blocks: &[usize] = match self.kind {
            Kind::Mfc => &[0, 1, 2],
            Kind::Mfg => &[0, 2],
        };
        for &b in blocks {
            let mut block = x.view((0, b * n), (n, n)).into_owned();
            symmetrize_in_place(&mut block);
            x.view_mut((0, b * n), (n, n)).copy_from(&block);
        }
    }
}

/// `Σ(·,m₁)`, `Γ(·,m₁)` and the trace tail integrals at one mass value.
#[derive(Clone, Debug)]
pub struct MeanFieldFamily {
    pub m1: f64,
    pub sigma: RiccatiSolution,
    pub gamma: RiccatiSolution,
    /// `∫_t^T tr Σ(s,m₁) ds` at every node.
    pub sigma_trace_tail: ScalarSeries,
    /// `∫_t^T tr Γ(s,m₁) ds` at every node.
    pub gamma_trace_tail: ScalarSeries,
}

fn trace_tail(sol: &RiccatiSolution) -> ScalarSeries {
    tail_integrals(&|s| sol.eval_at(s).map(|m| m.trace()).unwrap_or(f64::NAN), sol.grid())
}

fn solve_family(kind: Kind, params: &LQParams, c: &Coefficients, grid: &TimeGrid, m1: f64) -> Result<MeanFieldFamily> {
    let n = params.n();
    let sigma_t = match kind {
        Kind::Mfc => params.sigma_terminal_mfc(m1),
        Kind::Mfg => params.sigma_terminal_mfg(),
    };
    let mut terminal = Mat::zeros(n, 3 * n);
    terminal.view_mut((0, 0), (n, n)).copy_from(&params.p_terminal());
    terminal.view_mut((0, n), (n, n)).copy_from(&sigma_t);
    terminal.view_mut((0, 2 * n), (n, n)).copy_from(&params.gamma_terminal());
    let field = FamilyField { kind, c, m1 };
    let joint = integrate_backward(&field, &terminal, grid)?;
    let sigma = joint.block(n, n);
    let gamma = joint.block(2 * n, n);
    Ok(MeanFieldFamily {
        m1,
        sigma_trace_tail: trace_tail(&sigma),
        gamma_trace_tail: trace_tail(&gamma),
        sigma,
        gamma,
    })
}

/// Multiplicative perturbation of the ansatz coefficients, used to probe the
/// sensitivity of residual checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub p: f64,
    pub sigma: f64,
    pub gamma: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            p: 1.0,
            sigma: 1.0,
            gamma: 1.0,
        }
    }
}

/// Assembled quadratic solution of the Master equation.
#[derive(Clone, Debug)]
pub struct MasterAnsatz {
    kind: Kind,
    params: LQParams,
    coefficients: Coefficients,
    grid: TimeGrid,
    p: RiccatiSolution,
    /// `∫_t^T (½ tr aP + ½β² tr P) ds`.
    base_tail: ScalarSeries,
    families: Vec<MeanFieldFamily>,
    perturbation: Perturbation,
}

fn solve_master(kind: Kind, params: &LQParams, grid: &TimeGrid, m1_samples: &[f64]) -> Result<MasterAnsatz> {
    params.validate()?;
    if m1_samples.is_empty() {
        return Err(Error::params("at least one m1 sample is required"));
    }
    if let Some(bad) = m1_samples.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
        return Err(Error::params(format!("m1 samples must be > 0, got {bad}")));
    }
    let coefficients = Coefficients::new(params);
    let p_field = AffineQuadraticField::lq(&coefficients.a, &coefficients.k, &coefficients.q_sum)?;
    let p = integrate_backward(&p_field, &params.p_terminal(), grid)?;

    let a = params.diffusion();
    let beta2 = params.beta * params.beta;
    let base_tail = tail_integrals(
        &|s| {
            let ps = p.eval_at(s).expect("node inside grid");
            0.5 * (&a * &ps).trace() + 0.5 * beta2 * ps.trace()
        },
        grid,
    );

    let mut samples: Vec<f64> = m1_samples.to_vec();
    samples.sort_by(f64::total_cmp);
    samples.dedup();
    let families = Exec::Parallel
        .map(samples.len(), |i| solve_family(kind, params, &coefficients, grid, samples[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    Ok(MasterAnsatz {
        kind,
        params: params.clone(),
        coefficients,
        grid: *grid,
        p,
        base_tail,
        families,
        perturbation: Perturbation::default(),
    })
}

/// Mean field type control solution with `Σ`, `Γ` pre-solved at `m1_samples`.
pub fn solve_master_mfc(p: &LQParams, grid: &TimeGrid, m1_samples: &[f64]) -> Result<MasterAnsatz> {
    solve_master(Kind::Mfc, p, grid, m1_samples)
}

/// Mean field game solution with `Σ`, `Γ` pre-solved at `m1_samples`.
pub fn solve_master_mfg(p: &LQParams, grid: &TimeGrid, m1_samples: &[f64]) -> Result<MasterAnsatz> {
    solve_master(Kind::Mfg, p, grid, m1_samples)
}

impl MasterAnsatz {
    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn params(&self) -> &LQParams {
        &self.params
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.params.n()
    }

    pub fn p_solution(&self) -> &RiccatiSolution {
        &self.p
    }

    pub fn families(&self) -> &[MeanFieldFamily] {
        &self.families
    }

    pub fn perturbation(&self) -> Perturbation {
        self.perturbation
    }

    pub fn require(&self, kind: Kind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::KindMismatch {
                expected: kind.name(),
                found: self.kind.name(),
            })
        }
    }

    /// Copy whose `P`, `Σ`, `Γ` are scaled by the given factors on evaluation.
    pub fn perturbed(&self, perturbation: Perturbation) -> Self {
        Self {
            perturbation,
            ..self.clone()
        }
    }

    /// Family at `m1`: the cached one when `m1` was sampled, otherwise a fresh
    /// solve (no interpolation across masses).
    pub fn family(&self, m1: f64) -> Result<Cow<'_, MeanFieldFamily>> {
        if let Some(f) = self.families.iter().find(|f| f.m1 == m1) {
            return Ok(Cow::Borrowed(f));
        }
        if !m1.is_finite() {
            return Err(Error::params(format!("mass must be finite, got {m1}")));
        }
        solve_family(self.kind, &self.params, &self.coefficients, &self.grid, m1).map(Cow::Owned)
    }

    pub fn p_at(&self, t: f64) -> Result<Mat> {
        Ok(self.p.eval_at(t)? * self.perturbation.p)
    }

    pub fn p_dot(&self, t: f64) -> Result<Mat> {
        Ok(self.p.derivative_at(t)? * self.perturbation.p)
    }

    pub fn sigma_at(&self, family: &MeanFieldFamily, t: f64) -> Result<Mat> {
        Ok(family.sigma.eval_at(t)? * self.perturbation.sigma)
    }

    pub fn sigma_dot(&self, family: &MeanFieldFamily, t: f64) -> Result<Mat> {
        Ok(family.sigma.derivative_at(t)? * self.perturbation.sigma)
    }

    pub fn gamma_at(&self, family: &MeanFieldFamily, t: f64) -> Result<Mat> {
        Ok(family.gamma.eval_at(t)? * self.perturbation.gamma)
    }

    pub fn gamma_dot(&self, family: &MeanFieldFamily, t: f64) -> Result<Mat> {
        Ok(family.gamma.derivative_at(t)? * self.perturbation.gamma)
    }

    /// `μ(·,m₁)`, the measure-independent part of `U`, as a node series.
    pub fn mu_series(&self, family: &MeanFieldFamily) -> ScalarSeries {
        let b2 = self.params.beta * self.params.beta;
        let m1 = family.m1;
        self.base_tail
            .combine(1.0, &family.gamma_trace_tail, 0.5 * b2 * m1 * m1)
            .combine(1.0, &family.sigma_trace_tail, b2 * m1)
    }

    /// `λ(·,m₁)`, the measure-independent part of `V` (control problem).
    pub fn lambda_series(&self, family: &MeanFieldFamily) -> ScalarSeries {
        let b2 = self.params.beta * self.params.beta;
        let m1 = family.m1;
        self.base_tail
            .scale(m1)
            .combine(1.0, &family.sigma_trace_tail, 0.5 * b2 * m1 * m1)
    }

    pub fn mu_at(&self, family: &MeanFieldFamily, t: f64) -> Result<f64> {
        self.mu_series(family).eval_at(t)
    }

    pub fn mu_dot(&self, family: &MeanFieldFamily, t: f64) -> Result<f64> {
        self.mu_series(family).derivative_at(t)
    }

    pub fn lambda_at(&self, family: &MeanFieldFamily, t: f64) -> Result<f64> {
        self.lambda_series(family).eval_at(t)
    }

    /// `∫_t^T (½ tr aP + ½β² tr P) ds`.
    pub fn base_tail(&self) -> &ScalarSeries {
        &self.base_tail
    }
}

/// `V(m,t) = ½ tr(P M₂) + ½ yᵀΣy + λ` for the control problem.
pub fn eval_v(ans: &MasterAnsatz, mom: &MeasureMoments, t: f64) -> Result<f64> {
    ans.require(Kind::Mfc)?;
    let fam = ans.family(mom.m1)?;
    let p = ans.p_at(t)?;
    let sig = ans.sigma_at(&fam, t)?;
    Ok(0.5 * (&p * &mom.m2).trace() + 0.5 * mom.y.dot(&(&sig * &mom.y)) + ans.lambda_at(&fam, t)?)
}

/// `U(x,m,t)` for either kind.
pub fn eval_u(ans: &MasterAnsatz, x: &Vector, mom: &MeasureMoments, t: f64) -> Result<f64> {
    let fam = ans.family(mom.m1)?;
    eval_u_with(ans, &fam, x, &mom.y, t)
}

pub(crate) fn eval_u_with(ans: &MasterAnsatz, fam: &MeanFieldFamily, x: &Vector, y: &Vector, t: f64) -> Result<f64> {
    if x.len() != ans.n() || y.len() != ans.n() {
        return Err(Error::dims("state and moment dimension must equal n"));
    }
    let p = ans.p_at(t)?;
    let sig = ans.sigma_at(fam, t)?;
    let gam = ans.gamma_at(fam, t)?;
    let cross = match ans.kind() {
        Kind::Mfc => y.dot(&(&sig * x)),
        Kind::Mfg => x.dot(&(&sig * y)),
    };
    Ok(0.5 * x.dot(&(&p * x)) + cross + 0.5 * y.dot(&(&gam * y)) + ans.mu_at(fam, t)?)
}
