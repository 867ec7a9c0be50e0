//! Finite-player games built from the Master equation, and derivative
//! identities for functionals of empirical measures.
//!
//! Player `i` uses `uⁱ(x¹,…,x^N,t) = U(xⁱ, m^{-i}, t)` with
//! `m^{-i} = (1/(N−1)) Σ_{j≠i} δ_{x^j}`. Since `U` is quadratic, every partial
//! derivative of `uⁱ` is explicit:
//!
//! ```text
//! D_{xⁱ}uⁱ = P xⁱ + Σ y⁻ⁱ            D_{x^j}uⁱ = (Σᵀxⁱ + Γ y⁻ⁱ)/(N−1)
//! D²_{xⁱxⁱ}uⁱ = P   D²_{xⁱx^j}uⁱ = Σ/(N−1)   D²_{x^jx^k}uⁱ = Γ/(N−1)²
//! ```

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{Mat, Vector};
use crate::lq_model::{dynamics, eval_u, hamiltonian, optimal_drift, running_cost, terminal_cost, Kind, LQParams, MasterAnsatz, MeasureMoments};
use crate::mckean_vlasov::Estimate;
use crate::riccati::TimeGrid;
use crate::rng::{normal_vector, substream, COMMON_LANE};

/// Uniformly weighted atomic measure.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    pub points: Vec<Vector>,
    pub weight: f64,
    normalized: bool,
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<Vector>, weight: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::params("an empirical measure needs at least one point"));
        }
        Ok(Self {
            points,
            weight,
            normalized: false,
        })
    }

    /// Weight `1/K`; the mass is exactly one.
    pub fn normalized(points: Vec<Vector>) -> Result<Self> {
        let k = points.len() as f64;
        let mut m = Self::new(points, 1.0 / k)?;
        m.normalized = true;
        Ok(m)
    }

    /// `(1/(N−1)) Σ_{j≠i} δ_{x^j}`.
    pub fn others(states: &[Vector], i: usize) -> Result<Self> {
        if i >= states.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: states.len(),
            });
        }
        let pts = states
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, x)| x.clone())
            .collect();
        Self::normalized(pts)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn moments(&self) -> MeasureMoments {
        let mut m = MeasureMoments::from_points(&self.points, self.weight);
        if self.normalized {
            m.m1 = 1.0;
        }
        m
    }
}

/// Symmetric kernel `Γ(u,v)` of `F(m) = ∫∫ Γ(ξ,η) m(dξ) m(dη)`.
pub trait PairKernel: Sync {
    fn value(&self, u: &Vector, v: &Vector) -> f64;
    /// `∂_u Γ(u,v)`.
    fn grad_u(&self, u: &Vector, v: &Vector) -> Vector;
    /// `∂²_{uu} Γ(u,v)`.
    fn hess_uu(&self, u: &Vector, v: &Vector) -> Mat;
    /// `∂_u ∂_v Γ(u,v)`, entry `(a,b)` is `∂²Γ/∂u_a∂v_b`.
    fn hess_uv(&self, u: &Vector, v: &Vector) -> Mat;
}

/// `Γ(u,v) = uᵀ M v` with `M` symmetric.
#[derive(Clone, Debug)]
pub struct BilinearKernel(pub Mat);

impl PairKernel for BilinearKernel {
    fn value(&self, u: &Vector, v: &Vector) -> f64 {
        u.dot(&(&self.0 * v))
    }
    fn grad_u(&self, _u: &Vector, v: &Vector) -> Vector {
        &self.0 * v
    }
    fn hess_uu(&self, u: &Vector, _v: &Vector) -> Mat {
        Mat::zeros(u.len(), u.len())
    }
    fn hess_uv(&self, _u: &Vector, _v: &Vector) -> Mat {
        self.0.clone()
    }
}

/// `Γ(u,v) = c`.
#[derive(Clone, Debug)]
pub struct ConstantKernel(pub f64);

impl PairKernel for ConstantKernel {
    fn value(&self, _u: &Vector, _v: &Vector) -> f64 {
        self.0
    }
    fn grad_u(&self, u: &Vector, _v: &Vector) -> Vector {
        Vector::zeros(u.len())
    }
    fn hess_uu(&self, u: &Vector, _v: &Vector) -> Mat {
        Mat::zeros(u.len(), u.len())
    }
    fn hess_uv(&self, u: &Vector, _v: &Vector) -> Mat {
        Mat::zeros(u.len(), u.len())
    }
}

/// `Γ(u,v) = ½(φ(u) + φ(v))` with `φ(u) = uᵀMu + cᵀu`, which makes `F`
/// affine in `m` on probability measures.
#[derive(Clone, Debug)]
pub struct SeparableKernel {
    pub quad: Mat,
    pub lin: Vector,
}

impl SeparableKernel {
    fn phi(&self, u: &Vector) -> f64 {
        u.dot(&(&self.quad * u)) + self.lin.dot(u)
    }
}

impl PairKernel for SeparableKernel {
    fn value(&self, u: &Vector, v: &Vector) -> f64 {
        0.5 * (self.phi(u) + self.phi(v))
    }
    fn grad_u(&self, u: &Vector, _v: &Vector) -> Vector {
        (&self.quad * u * 2.0 + &self.lin) * 0.5
    }
    fn hess_uu(&self, _u: &Vector, _v: &Vector) -> Mat {
        self.quad.clone()
    }
    fn hess_uv(&self, u: &Vector, _v: &Vector) -> Mat {
        Mat::zeros(u.len(), u.len())
    }
}

/// `Γ(u,v) = exp(−|u−v|²/(2ℓ²))`.
#[derive(Clone, Debug)]
pub struct GaussianKernel {
    pub length: f64,
}

impl PairKernel for GaussianKernel {
    fn value(&self, u: &Vector, v: &Vector) -> f64 {
        (-(u - v).norm_squared() / (2.0 * self.length * self.length)).exp()
    }
    fn grad_u(&self, u: &Vector, v: &Vector) -> Vector {
        let l2 = self.length * self.length;
        -(u - v) * (self.value(u, v) / l2)
    }
    fn hess_uu(&self, u: &Vector, v: &Vector) -> Mat {
        let l2 = self.length * self.length;
        let d = u - v;
        (&d * d.transpose() / l2 - Mat::identity(u.len(), u.len())) * (self.value(u, v) / l2)
    }
    fn hess_uv(&self, u: &Vector, v: &Vector) -> Mat {
        -self.hess_uu(u, v)
    }
}

/// `F(m) = ∫∫ Γ dm dm` evaluated on empirical measures.
pub struct QuadraticFunctional<'a> {
    pub kernel: &'a dyn PairKernel,
}

impl QuadraticFunctional<'_> {
    pub fn value(&self, m: &EmpiricalMeasure) -> f64 {
        let w = m.weight;
        let mut acc = 0.0;
        for u in &m.points {
            for v in &m.points {
                acc += self.kernel.value(u, v);
            }
        }
        w * w * acc
    }

    fn at(&self, points: &[Vector], weight: f64) -> f64 {
        let m = EmpiricalMeasure {
            points: points.to_vec(),
            weight,
            normalized: false,
        };
        self.value(&m)
    }
}

/// First-derivative step.
pub const FD_STEP: f64 = 1e-6;
/// Second-derivative step (five-point stencil).
pub const FD_STEP2: f64 = 1e-3;

fn second_derivative(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 16.0 * f(h) - 30.0 * f(0.0) + 16.0 * f(-h) - f(-2.0 * h)) / (12.0 * h * h)
}

/// `∫ D_ξ(∂F/∂m)(ξ)·B(ξ) m(dξ)` against `Σ_j D_{x^j}Φ·B(x^j)`, where
/// `Φ(x) = F(Σ_j w δ_{x^j})`; the right side uses central differences.
pub fn prop61_first_identity(f: &QuadraticFunctional<'_>, m: &EmpiricalMeasure, field: &dyn Fn(&Vector) -> Vector) -> (f64, f64) {
    let w = m.weight;
    let pts = &m.points;
    let mut lhs = 0.0;
    for xj in pts {
        let b = field(xj);
        for xk in pts {
            lhs += 2.0 * w * w * f.kernel.grad_u(xj, xk).dot(&b);
        }
    }
    let mut rhs = 0.0;
    for (j, xj) in pts.iter().enumerate() {
        let b = field(xj);
        for l in 0..xj.len() {
            if b[l] == 0.0 {
                continue;
            }
            let shifted = |s: f64| {
                let mut q = pts.clone();
                q[j][l] += s;
                f.at(&q, w)
            };
            rhs += (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP) * b[l];
        }
    }
    (lhs, rhs)
}

/// `∫Δ_ξ(∂F/∂m) m + ∫∫ tr D_ξD_η(∂²F/∂m²) m m` against
/// `Σ_{j,k} tr D²_{x^j x^k}Φ`. The right side is the second derivative along
/// `e_l` applied to every point at once, summed over `l`.
pub fn prop61_second_identity(f: &QuadraticFunctional<'_>, m: &EmpiricalMeasure) -> (f64, f64) {
    let w = m.weight;
    let pts = &m.points;
    let mut lhs = 0.0;
    for xj in pts {
        for xk in pts {
            lhs += 2.0 * w * w * (f.kernel.hess_uu(xj, xk).trace() + f.kernel.hess_uv(xj, xk).trace());
        }
    }
    let n = pts[0].len();
    let rhs = (0..n)
        .map(|l| {
            second_derivative(
                |s| {
                    let q: Vec<Vector> = pts
                        .iter()
                        .map(|x| {
                            let mut x = x.clone();
                            x[l] += s;
                            x
                        })
                        .collect();
                    f.at(&q, w)
                },
                FD_STEP2,
            )
        })
        .sum();
    (lhs, rhs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThirdIdentity {
    /// `∫ tr(a D²_ξ ∂F/∂m) m`, analytic.
    pub lhs: f64,
    /// `Σ_j tr(a D²_{x^j x^j} Φ)` by finite differences.
    pub rhs: f64,
    /// `|lhs − rhs|`.
    pub gap: f64,
    /// Analytic total-derivative gap `2w² Σ_j tr(a ∂_u∂_vΓ(x^j,x^j))`.
    pub predicted_gap: f64,
}

/// `∫ tr(a D²_ξ ∂F/∂m) m` against `Σ_j tr(a D²_{x^j x^j}Φ)`. The two differ by
/// the diagonal cross terms `∂_u∂_vΓ(x^j,x^j)`, an `O(1/K)` gap.
pub fn prop61_third_identity(f: &QuadraticFunctional<'_>, m: &EmpiricalMeasure, a: &Mat) -> Result<ThirdIdentity> {
    let w = m.weight;
    let pts = &m.points;
    let mut lhs = 0.0;
    let mut predicted = 0.0;
    for xj in pts {
        for xk in pts {
            lhs += 2.0 * w * w * (a * f.kernel.hess_uu(xj, xk)).trace();
        }
        predicted += 2.0 * w * w * (a * f.kernel.hess_uv(xj, xj)).trace();
    }
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    if eig.eigenvalues.iter().any(|l| *l < -1e-12) {
        return Err(Error::params("diffusion matrix must be positive semi-definite"));
    }
    let mut rhs = 0.0;
    for j in 0..pts.len() {
        for (e, lambda) in eig.eigenvalues.iter().enumerate() {
            if *lambda == 0.0 {
                continue;
            }
            let dir = eig.eigenvectors.column(e).into_owned();
            rhs += lambda
                * second_derivative(
                    |s| {
                        let mut q = pts.clone();
                        q[j] += &dir * s;
                        f.at(&q, w)
                    },
                    FD_STEP2,
                );
        }
    }
    Ok(ThirdIdentity {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
        predicted_gap: predicted,
    })
}

/// `uⁱ = U(xⁱ, m^{-i}, t)`.
pub fn u_i_from_master(ans: &MasterAnsatz, states: &[Vector], i: usize, t: f64) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::params("at least two players are required"));
    }
    let others = EmpiricalMeasure::others(states, i)?;
    eval_u(ans, &states[i], &others.moments(), t)
}

/// Which measure enters the drift `G(x^j, ·, D_{x^j}u^j)` in player `i`'s
/// equation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriftEvaluation {
    /// Player `j`'s own view `m^{-j}` and own gradient `D_{x^j}u^j`.
    PlayerMeasure,
    /// Player `i`'s measure `m^{-i}` and the Master gradient `D_ξU(x^j, m^{-i})`.
    ReferenceMeasure,
}

/// Signed terms of player `i`'s equation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NashTerms {
    pub time: f64,
    pub diffusion: f64,
    pub common: f64,
    pub flow: f64,
    pub hamiltonian: f64,
}

impl NashTerms {
    pub fn total(&self) -> f64 {
        self.time + self.diffusion + self.common + self.flow + self.hamiltonian
    }
}

/// `LHS − RHS` of the N-player system for every player.
pub fn nash_system_terms(ans: &MasterAnsatz, states: &[Vector], t: f64, convention: DriftEvaluation) -> Result<Vec<NashTerms>> {
    ans.require(Kind::Mfg)?;
    let n_players = states.len();
    if n_players < 2 {
        return Err(Error::params("at least two players are required"));
    }
    if states.iter().any(|x| x.len() != ans.n()) {
        return Err(Error::dims("player states must have dimension n"));
    }
    let p = ans.params();
    let fam = ans.family(1.0)?;
    let pm = ans.p_at(t)?;
    let sig = ans.sigma_at(&fam, t)?;
    let gam = ans.gamma_at(&fam, t)?;
    let p_dot = ans.p_dot(t)?;
    let s_dot = ans.sigma_dot(&fam, t)?;
    let g_dot = ans.gamma_dot(&fam, t)?;
    let mu_dot = ans.mu_dot(&fam, t)?;
    let a = p.diffusion();
    let b2 = p.beta * p.beta;
    let inv = 1.0 / (n_players - 1) as f64;

    let total = states.iter().fold(Vector::zeros(ans.n()), |acc, x| acc + x);
    let others_mean = |i: usize| (&total - &states[i]) * inv;
    let others_moments = |i: usize| {
        let y = others_mean(i);
        // only the first moment enters H and G
        MeasureMoments {
            m1: 1.0,
            m2: &y * y.transpose(),
            y,
        }
    };

    let diffusion = -(0.5 * (&a * &pm).trace() + 0.5 * inv * (&a * &gam).trace());
    let common = -0.5 * b2 * (pm.trace() + 2.0 * sig.trace() + gam.trace());

    Ok(Exec::Parallel.map(n_players, |i| {
        let xi = &states[i];
        let mom_i = others_moments(i);
        let yi = &mom_i.y;
        let time = -(0.5 * xi.dot(&(&p_dot * xi)) + xi.dot(&(&s_dot * yi)) + 0.5 * yi.dot(&(&g_dot * yi)) + mu_dot);
        let cross = (sig.transpose() * xi + &gam * yi) * inv;
        let mut flow = 0.0;
        for (j, xj) in states.iter().enumerate() {
            if j == i {
                continue;
            }
            let g = match convention {
                DriftEvaluation::PlayerMeasure => {
                    let mom_j = others_moments(j);
                    let q = &pm * xj + &sig * &mom_j.y;
                    optimal_drift(p, xj, &mom_j, &q)
                }
                DriftEvaluation::ReferenceMeasure => {
                    let q = &pm * xj + &sig * yi;
                    optimal_drift(p, xj, &mom_i, &q)
                }
            };
            flow -= cross.dot(&g);
        }
        let du = &pm * xi + &sig * yi;
        NashTerms {
            time,
            diffusion,
            common,
            flow,
            hamiltonian: -hamiltonian(p, xi, &mom_i, &du),
        }
    }))
}

/// Residuals of the N-player system, one per player.
pub fn nash_system_residual(ans: &MasterAnsatz, states: &[Vector], t: f64, convention: DriftEvaluation) -> Result<Vec<f64>> {
    Ok(nash_system_terms(ans, states, t, convention)?.iter().map(NashTerms::total).collect())
}

/// Closed form of the `PlayerMeasure` minus `ReferenceMeasure` residual:
/// `−(Σᵀxⁱ + Γy⁻ⁱ)·(Ā − KΣ)(xⁱ − y⁻ⁱ)/(N−1)`.
pub fn drift_convention_gap(ans: &MasterAnsatz, states: &[Vector], t: f64) -> Result<Vec<f64>> {
    ans.require(Kind::Mfg)?;
    let p = ans.params();
    let fam = ans.family(1.0)?;
    let sig = ans.sigma_at(&fam, t)?;
    let gam = ans.gamma_at(&fam, t)?;
    let k = p.control_kernel();
    let inv = 1.0 / (states.len() - 1) as f64;
    let total = states.iter().fold(Vector::zeros(ans.n()), |acc, x| acc + x);
    Ok(states
        .iter()
        .map(|xi| {
            let yi = (&total - xi) * inv;
            let cross = sig.transpose() * xi + &gam * &yi;
            -cross.dot(&((&p.a_bar - &k * &sig) * (xi - &yi))) * inv
        })
        .collect())
}

/// Feedback of player `i` given all states: `(i, states, t) ↦ vⁱ`.
pub type PlayerFeedback<'a> = dyn Fn(usize, &[Vector], f64) -> Vector + Sync + 'a;

/// The Nash feedback `−R⁻¹Bᵀ(P xⁱ + Σ(t,1) y⁻ⁱ)` of a game ansatz.
pub fn nash_feedback(ans: &MasterAnsatz) -> Result<impl Fn(usize, &[Vector], f64) -> Vector + Sync + '_> {
    ans.require(Kind::Mfg)?;
    let sigma = ans.family(1.0)?.into_owned().sigma;
    let p = ans.params();
    let gain = p.r_inv() * p.b.transpose();
    Ok(move |i: usize, states: &[Vector], t: f64| {
        let inv = 1.0 / (states.len() - 1) as f64;
        let total = states.iter().fold(Vector::zeros(states[i].len()), |acc, x| acc + x);
        let yi = (total - &states[i]) * inv;
        -(&gain * (ans.p_at(t).expect("time on grid") * &states[i] + sigma.eval_at(t).expect("time on grid") * yi))
    })
}

/// Monte Carlo estimate of every player's cost from fixed initial states.
pub fn finite_player_cost(
    p: &LQParams,
    states0: &[Vector],
    feedback: &PlayerFeedback<'_>,
    steps: usize,
    seed: u64,
    replications: usize,
    exec: Exec,
) -> Result<Vec<Estimate>> {
    p.validate()?;
    let n_players = states0.len();
    if n_players < 2 || replications < 2 {
        return Err(Error::params("need at least two players and two replications"));
    }
    let grid = TimeGrid::horizon(p.horizon, steps)?;
    let h = grid.step();
    let n = p.n();
    let per_rep = exec.map(replications, |rep| {
        let rep = rep as u64;
        let mut common = substream(seed, rep, COMMON_LANE);
        let mut idio: Vec<_> = (0..n_players as u64).map(|j| substream(seed, rep, j)).collect();
        let mut x = states0.to_vec();
        let mut cost = vec![0.0; n_players];
        let others = |x: &[Vector], i: usize| {
            let total = x.iter().fold(Vector::zeros(n), |acc, v| acc + v);
            (total - &x[i]) / (n_players - 1) as f64
        };
        for k in 0..grid.num_steps() {
            let t = grid.node(k);
            let w = if k == 0 { 0.5 * h } else { h };
            let db = normal_vector(&mut common, n, h.sqrt()) * p.beta;
            let v: Vec<Vector> = (0..n_players).map(|i| feedback(i, &x, t)).collect();
            let next: Vec<Vector> = (0..n_players)
                .map(|i| {
                    let yi = others(&x, i);
                    cost[i] += w * running_cost(p, &x[i], &yi, &v[i]);
                    let dw = normal_vector(&mut idio[i], n, h.sqrt());
                    &x[i] + dynamics(p, &x[i], &yi, &v[i]) * h + &p.sigma * dw + &db
                })
                .collect();
            x = next;
        }
        let t_end = grid.t_end();
        for i in 0..n_players {
            let yi = others(&x, i);
            let v = feedback(i, &x, t_end);
            cost[i] += 0.5 * h * running_cost(p, &x[i], &yi, &v) + terminal_cost(p, &x[i], &yi);
        }
        cost
    });
    Ok((0..n_players)
        .map(|i| Estimate::from_samples(&per_rep.iter().map(|c| c[i]).collect::<Vec<_>>()))
        .collect())
}

/// Deterministic spread-out player states: component `c` of player `j` is an
/// equally spaced value in `[−1, 1]`, with components decorrelated by a
/// stride permutation.
pub fn lattice_states(n_players: usize, n: usize) -> Vec<Vector> {
    let pos = |k: usize| {
        if n_players == 1 {
            0.0
        } else {
            -1.0 + 2.0 * k as f64 / (n_players - 1) as f64
        }
    };
    (0..n_players)
        .map(|j| Vector::from_fn(n, |c, _| pos((j * (2 * c + 1) + c) % n_players)))
        .collect()
}
