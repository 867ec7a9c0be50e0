//! Particle systems driven by idiosyncratic and common noise, the conditional
//! mean dynamics, and the backward quantities `r`, `s` of the stochastic HJB
//! equation along the optimal conditional-mean path.
//!
//! All randomness comes from [`crate::rng`] substreams: the common path of a
//! replication uses lane [`COMMON_LANE`], particle `j` uses lane `j`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{psd_sqrt, Mat, Vector};
use crate::lq_model::{dynamics, hamiltonian, hamiltonian_mean_gradient, running_cost, terminal_cost, Kind, LQParams, MasterAnsatz, MeasureMoments};
use crate::riccati::{RiccatiSolution, TimeGrid};
use crate::rng::{normal_vector, substream, substream_seed, COMMON_LANE};
use crate::table::{indexed, Table};

/// Increments of the common Wiener process `b` on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    grid: TimeGrid,
    increments: Vec<Vector>,
    seed: u64,
    replication: u64,
}

impl BrownianPath {
    pub fn sample(grid: &TimeGrid, dim: usize, seed: u64, replication: u64) -> Self {
        let mut rng = substream(seed, replication, COMMON_LANE);
        let sd = grid.step().sqrt();
        let increments = (0..grid.num_steps()).map(|_| normal_vector(&mut rng, dim, sd)).collect();
        Self {
            grid: *grid,
            increments,
            seed,
            replication,
        }
    }

    pub fn zero(grid: &TimeGrid, dim: usize) -> Self {
        Self {
            grid: *grid,
            increments: vec![Vector::zeros(dim); grid.num_steps()],
            seed: 0,
            replication: 0,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn increments(&self) -> &[Vector] {
        &self.increments
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replication(&self) -> u64 {
        self.replication
    }

    pub fn dim(&self) -> usize {
        self.increments.first().map_or(0, |v| v.len())
    }

    /// `b(T) − b(0)`.
    pub fn total(&self) -> Vector {
        self.increments.iter().fold(Vector::zeros(self.dim()), |acc, d| acc + d)
    }
}

fn check_grid(expected: &TimeGrid, found: &TimeGrid) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::GridMismatch(format!(
            "expected [{}, {}] with {} steps, found [{}, {}] with {} steps",
            expected.t_start(),
            expected.t_end(),
            expected.num_steps(),
            found.t_start(),
            found.t_end(),
            found.num_steps()
        )))
    }
}

/// Per-step transition matrices `Φ(t_{k+1}, t_k)` of `dΦ/dt = M(t)Φ`.
#[derive(Clone, Debug)]
pub struct FundamentalMatrix {
    grid: TimeGrid,
    steps: Vec<Mat>,
}

impl FundamentalMatrix {
    /// RK4 on every grid step; `generator` is evaluated at nodes and midpoints.
    pub fn new(grid: &TimeGrid, generator: &(dyn Fn(f64) -> Mat + Sync)) -> Self {
        let h = grid.step();
        let steps = Exec::Parallel.map(grid.num_steps(), |k| {
            let t = grid.node(k);
            let m0 = generator(t);
            let mh = generator(t + 0.5 * h);
            let m1 = generator(grid.node(k + 1));
            let id = Mat::identity(m0.nrows(), m0.ncols());
            let k1 = &m0 * &id;
            let k2 = &mh * (&id + &k1 * (0.5 * h));
            let k3 = &mh * (&id + &k2 * (0.5 * h));
            let k4 = &m1 * (&id + &k3 * h);
            id + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
        });
        Self { grid: *grid, steps }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `Φ(t_{k+1}, t_k)`.
    pub fn step(&self, k: usize) -> &Mat {
        &self.steps[k]
    }

    /// `Φ(t_to, t_from)` for node indices `from ≤ to`.
    pub fn compose(&self, to: usize, from: usize) -> Result<Mat> {
        if to >= self.grid.num_nodes() || from > to {
            return Err(Error::IndexOutOfRange {
                index: to,
                len: self.grid.num_nodes(),
            });
        }
        let n = self.steps.first().map_or(0, |m| m.nrows());
        Ok(self.steps[from..to].iter().fold(Mat::identity(n, n), |acc, s| s * acc))
    }
}

/// Generator `A + Ā − K P(t)` of the open-loop adjoint flow.
fn flow_without_sigma(ans: &MasterAnsatz) -> impl Fn(f64) -> Mat + Sync + '_ {
    let p = ans.params();
    let base = &p.a + &p.a_bar;
    let k = p.control_kernel();
    move |t| &base - &k * ans.p_at(t).expect("time on grid")
}

/// Generator `A + Ā − K (P(t) + Σ(t,1))` of the conditional mean.
fn flow_with_sigma<'a>(ans: &'a MasterAnsatz, sigma: &'a RiccatiSolution) -> impl Fn(f64) -> Mat + Sync + 'a {
    let p = ans.params();
    let base = &p.a + &p.a_bar;
    let k = p.control_kernel();
    let scale = ans.perturbation().sigma;
    move |t| &base - &k * (ans.p_at(t).expect("time on grid") + sigma.eval_at(t).expect("time on grid") * scale)
}

fn sigma_unit_mass(ans: &MasterAnsatz) -> Result<RiccatiSolution> {
    Ok(ans.family(1.0)?.into_owned().sigma)
}

/// Euler–Maruyama for `dy = (A + Ā − K(P + Σ(t,1))) y dt + β db`.
pub fn simulate_conditional_mean(ans: &MasterAnsatz, y0: &Vector, path: &BrownianPath) -> Result<Vec<Vector>> {
    check_grid(ans.grid(), path.grid())?;
    let sigma = sigma_unit_mass(ans)?;
    let gen = flow_with_sigma(ans, &sigma);
    let grid = path.grid();
    let beta = ans.params().beta;
    let mut y = y0.clone();
    let mut out = Vec::with_capacity(grid.num_nodes());
    out.push(y.clone());
    for (k, db) in path.increments().iter().enumerate() {
        let m = gen(grid.node(k));
        y = &y + &m * &y * grid.step() + db * beta;
        out.push(y.clone());
    }
    Ok(out)
}

/// State of `N` particles at one time index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    pub states: Vec<Vector>,
    pub idiosyncratic_seeds: Vec<u64>,
    pub time_index: usize,
}

impl ParticleEnsemble {
    pub fn count(&self) -> usize {
        self.states.len()
    }

    pub fn mean(&self) -> Vector {
        empirical_mean(&self.states)
    }

    pub fn moments(&self) -> MeasureMoments {
        MeasureMoments::from_points(&self.states, 1.0 / self.count() as f64)
    }
}

pub(crate) fn empirical_mean(states: &[Vector]) -> Vector {
    let n = states.first().map_or(0, |s| s.len());
    let sum = states.iter().fold(Vector::zeros(n), |acc, s| acc + s);
    sum / states.len() as f64
}

/// Empirical mean path and final ensemble of a particle simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleTrajectory {
    pub means: Vec<Vector>,
    /// `max_j |x_j − ȳ|` at every node.
    pub spread: Vec<f64>,
    pub last: ParticleEnsemble,
}

struct Particle {
    x: Vector,
    rng: ChaCha8Rng,
}

fn spawn_particles(count: usize, mean: &Vector, cov: &Mat, seed: u64, replication: u64) -> Result<(Vec<Particle>, Vec<u64>)> {
    let root = psd_sqrt(cov)?;
    let seeds: Vec<u64> = (0..count as u64).map(|j| substream_seed(seed, replication, j)).collect();
    let particles = seeds
        .iter()
        .enumerate()
        .map(|(j, _)| {
            let mut rng = substream(seed, replication, j as u64);
            let z = normal_vector(&mut rng, mean.len(), 1.0);
            Particle {
                x: mean + &root * z,
                rng,
            }
        })
        .collect();
    Ok((particles, seeds))
}

fn spread(states: &[Vector], mean: &Vector) -> f64 {
    states.iter().map(|s| (s - mean).amax()).fold(0.0, f64::max)
}

/// Euler–Maruyama for the particle system under the optimal feedback
/// `v̂ = −R⁻¹Bᵀ(P x + Σ(t,1) ȳ)`, with `ȳ` the ensemble's own mean.
pub fn simulate_particles(
    ans: &MasterAnsatz,
    count: usize,
    m0_mean: &Vector,
    m0_cov: &Mat,
    path: &BrownianPath,
    exec: Exec,
) -> Result<ParticleTrajectory> {
    check_grid(ans.grid(), path.grid())?;
    if count < 2 {
        return Err(Error::params("at least two particles are required"));
    }
    let p = ans.params();
    let n = p.n();
    if m0_mean.len() != n || m0_cov.shape() != (n, n) {
        return Err(Error::dims("initial moments must match the state dimension"));
    }
    let sigma = sigma_unit_mass(ans)?;
    let k = p.control_kernel();
    let grid = *path.grid();
    let h = grid.step();
    let (mut particles, seeds) = spawn_particles(count, m0_mean, m0_cov, path.seed(), path.replication())?;

    let states = |ps: &[Particle]| ps.iter().map(|q| q.x.clone()).collect::<Vec<_>>();
    let mut current = states(&particles);
    let mut y_bar = empirical_mean(&current);
    let mut means = vec![y_bar.clone()];
    let mut spreads = vec![spread(&current, &y_bar)];
    for (step, db) in path.increments().iter().enumerate() {
        let t = grid.node(step);
        let pt = ans.p_at(t)?;
        let feedback_drift = &p.a - &k * &pt;
        let mean_drift = (&p.a_bar - &k * (sigma.eval_at(t)? * ans.perturbation().sigma)) * &y_bar;
        let common = db * p.beta;
        exec.for_each_mut(&mut particles, |_, q| {
            let dw = normal_vector(&mut q.rng, n, h.sqrt());
            q.x = &q.x + (&feedback_drift * &q.x + &mean_drift) * h + &p.sigma * dw + &common;
        });
        current = states(&particles);
        y_bar = empirical_mean(&current);
        means.push(y_bar.clone());
        spreads.push(spread(&current, &y_bar));
    }
    Ok(ParticleTrajectory {
        means,
        spread: spreads,
        last: ParticleEnsemble {
            states: current,
            idiosyncratic_seeds: seeds,
            time_index: grid.num_steps(),
        },
    })
}

fn inhomogeneity(p: &LQParams, pt: &Mat) -> Mat {
    let sqs = p.s.transpose() * &p.q_bar * &p.s;
    let qs = &p.q_bar * &p.s;
    let pa = pt * &p.a_bar;
    sqs - &qs - qs.transpose() + &pa + pa.transpose()
}

/// Matrix `Z(t_k)` with `r(t_k) = Z(t_k) y(t_k)`, from
/// `Z(t) = Φᵀ(T,t) Z_T Ψ(T,t) + ∫_t^T Φᵀ(s,t) C(s) Ψ(s,t) ds` discretised by
/// a trapezoid backward recursion. `Φ` is generated by `A + Ā − KP`, `Ψ` by
/// `A + Ā − K(P + Σ)`, which propagates `E[y(s) | y(t)]`.
pub fn backward_r_matrices(ans: &MasterAnsatz) -> Result<Vec<Mat>> {
    ans.require(Kind::Mfc)?;
    let p = ans.params();
    let grid = *ans.grid();
    let sigma = sigma_unit_mass(ans)?;
    let phi = FundamentalMatrix::new(&grid, &flow_without_sigma(ans));
    let psi = FundamentalMatrix::new(&grid, &flow_with_sigma(ans, &sigma));
    let h = grid.step();
    let c: Vec<Mat> = (0..grid.num_nodes())
        .map(|k| ans.p_at(grid.node(k)).map(|pt| inhomogeneity(p, &pt)))
        .collect::<Result<_>>()?;
    let sqs_t = p.s_t.transpose() * &p.q_bar_t * &p.s_t;
    let qs_t = &p.q_bar_t * &p.s_t;
    let mut z = vec![Mat::zeros(p.n(), p.n()); grid.num_nodes()];
    z[grid.num_steps()] = sqs_t - &qs_t - qs_t.transpose();
    for k in (0..grid.num_steps()).rev() {
        let (f, g) = (phi.step(k), psi.step(k));
        z[k] = f.transpose() * (&z[k + 1] + &c[k + 1] * (0.5 * h)) * g + &c[k] * (0.5 * h);
    }
    Ok(z)
}

/// `r(t_k) = Z(t_k) y(t_k)` along a conditional-mean trajectory.
pub fn backward_r(ans: &MasterAnsatz, y_traj: &[Vector], path: &BrownianPath) -> Result<Vec<Vector>> {
    ans.require(Kind::Mfc)?;
    check_grid(ans.grid(), path.grid())?;
    if y_traj.len() != path.grid().num_nodes() {
        return Err(Error::GridMismatch("trajectory length differs from grid nodes".into()));
    }
    let z = backward_r_matrices(ans)?;
    Ok(z.iter().zip(y_traj).map(|(z, y)| z * y).collect())
}

/// `Ĝ(t_k)` and `e(t_k)` with `E[∫_t^T ½ yᵀWy ds + ½ y(T)ᵀ S_TᵀQ̄_T S_T y(T) | y(t)] = ½ y(t)ᵀĜ y(t) + e(t)`,
/// where `W = SᵀQ̄S − ZᵀKZ + ZᵀĀ + ĀᵀZ` and the mean flow carries noise `β db`.
fn s_quadratic_part(ans: &MasterAnsatz, z: &[Mat]) -> Result<(Vec<Mat>, Vec<f64>)> {
    let p = ans.params();
    let grid = *ans.grid();
    let h = grid.step();
    let b2 = p.beta * p.beta;
    let k = p.control_kernel();
    let sqs = p.s.transpose() * &p.q_bar * &p.s;
    let sigma = sigma_unit_mass(ans)?;
    let psi = FundamentalMatrix::new(&grid, &flow_with_sigma(ans, &sigma));
    let w: Vec<Mat> = z
        .iter()
        .map(|z| {
            let za = z.transpose() * &p.a_bar;
            &sqs - z.transpose() * &k * z + &za + za.transpose()
        })
        .collect();
    let n_nodes = grid.num_nodes();
    let mut g = vec![Mat::zeros(p.n(), p.n()); n_nodes];
    let mut e = vec![0.0; n_nodes];
    g[n_nodes - 1] = p.gamma_terminal();
    for kk in (0..grid.num_steps()).rev() {
        let f = psi.step(kk);
        g[kk] = f.transpose() * (&g[kk + 1] + &w[kk + 1] * (0.5 * h)) * f + &w[kk] * (0.5 * h);
        e[kk] = e[kk + 1] + 0.25 * b2 * h * (g[kk].trace() + g[kk + 1].trace());
    }
    Ok((g, e))
}

/// Node values of `∫_t^T (½ tr aP + ½β² tr P + β² tr Σ(s,1)) ds`.
fn s_trace_part(ans: &MasterAnsatz) -> Result<Vec<f64>> {
    let fam = ans.family(1.0)?;
    let b2 = ans.params().beta * ans.params().beta;
    let series = ans.base_tail().combine(1.0, &fam.sigma_trace_tail, b2);
    Ok(series.values().to_vec())
}

/// `s(t_k)` in `u(x,t) = ½xᵀP(t)x + xᵀr(t) + s(t)` along `y_traj`.
pub fn scalar_s(ans: &MasterAnsatz, y_traj: &[Vector], path: &BrownianPath) -> Result<Vec<f64>> {
    check_grid(ans.grid(), path.grid())?;
    if y_traj.len() != path.grid().num_nodes() {
        return Err(Error::GridMismatch("trajectory length differs from grid nodes".into()));
    }
    let z = backward_r_matrices(ans)?;
    let (g, e) = s_quadratic_part(ans, &z)?;
    let traces = s_trace_part(ans)?;
    Ok(y_traj
        .iter()
        .enumerate()
        .map(|(k, y)| traces[k] + 0.5 * y.dot(&(&g[k] * y)) + e[k])
        .collect())
}

/// Matrices `Ĝ(t_k)` of [`scalar_s`], exposed for consistency checks.
pub fn scalar_s_matrices(ans: &MasterAnsatz) -> Result<Vec<Mat>> {
    let z = backward_r_matrices(ans)?;
    Ok(s_quadratic_part(ans, &z)?.0)
}

/// One-step residual of the stochastic HJB equation for
/// `u(x,t) = ½xᵀPx + xᵀr + s`:
///
/// `(E[u(x,t_{k+1}) | y(t_k)] − u(x,t_k))/h + ½tr aP + ½β² tr P + β² tr Σ + H(x,m,Du) + ∫∂H/∂m(ξ)(x) m(dξ)`,
///
/// maximised over `probes` and steps along `y_traj`.
pub fn hjb_step_residual(ans: &MasterAnsatz, y_traj: &[Vector], path: &BrownianPath, probes: &[Vector]) -> Result<f64> {
    ans.require(Kind::Mfc)?;
    check_grid(ans.grid(), path.grid())?;
    let p = ans.params();
    let grid = *ans.grid();
    let h = grid.step();
    let b2 = p.beta * p.beta;
    let a = p.diffusion();
    let z = backward_r_matrices(ans)?;
    let (g, e) = s_quadratic_part(ans, &z)?;
    let traces = s_trace_part(ans)?;
    let sigma = sigma_unit_mass(ans)?;
    let gen = flow_with_sigma(ans, &sigma);

    let worst = Exec::Parallel.map(grid.num_steps(), |k| -> Result<f64> {
        let t = grid.node(k);
        let y = &y_traj[k];
        let pk = ans.p_at(t)?;
        let pk1 = ans.p_at(grid.node(k + 1))?;
        let sig = sigma.eval_at(t)?;
        // one Euler step of the conditional mean: mean and covariance
        let y_next = y + gen(t) * y * h;
        let s_next = traces[k + 1] + 0.5 * y_next.dot(&(&g[k + 1] * &y_next)) + 0.5 * b2 * h * g[k + 1].trace() + e[k + 1];
        let s_now = traces[k] + 0.5 * y.dot(&(&g[k] * y)) + e[k];
        let r_now = &z[k] * y;
        let r_next = &z[k + 1] * &y_next;
        let mom = MeasureMoments {
            m1: 1.0,
            y: y.clone(),
            m2: y * y.transpose(),
        };
        let du_at = |x: &Vector| &pk * x + &r_now;
        let mean_grad = hamiltonian_mean_gradient(p, y, y, &du_at(y));
        let mut worst = 0.0_f64;
        for x in probes {
            let u_next = 0.5 * x.dot(&(&pk1 * x)) + x.dot(&r_next) + s_next;
            let u_now = 0.5 * x.dot(&(&pk * x)) + x.dot(&r_now) + s_now;
            let drift = 0.5 * (&a * &pk).trace()
                + 0.5 * b2 * pk.trace()
                + b2 * sig.trace()
                + hamiltonian(p, x, &mom, &du_at(x))
                + x.dot(&mean_grad);
            worst = worst.max(((u_next - u_now) / h + drift).abs());
        }
        Ok(worst)
    });
    worst.into_iter().try_fold(0.0_f64, |m, r| Ok(m.max(r?)))
}

/// Rows `t, y…, r…, s`.
pub fn fbsde_table(grid: &TimeGrid, y: &[Vector], r: &[Vector], s: &[f64]) -> Table {
    let n = y.first().map_or(0, |v| v.len());
    let header = std::iter::once("t".to_string())
        .chain(indexed("y", n))
        .chain(indexed("r", n))
        .chain(std::iter::once("s".to_string()));
    let mut table = Table::new(header);
    for k in 0..grid.num_nodes() {
        let mut row = vec![grid.node(k)];
        row.extend(y[k].iter());
        row.extend(r[k].iter());
        row.push(s[k]);
        table.push(row).expect("row width matches header");
    }
    table
}

/// Monte Carlo sizing shared by cost estimation and sweeps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonteCarlo {
    pub particles: usize,
    pub replications: usize,
    pub steps: usize,
    pub seed: u64,
    pub exec: Exec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        if samples.len() < 2 {
            return Self { mean, std_err: 0.0 };
        }
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

/// Feedback `(x, ȳ, t) ↦ v`.
pub type Feedback<'a> = dyn Fn(&Vector, &Vector, f64) -> Vector + Sync + 'a;

/// Per-particle objective averaged over the ensemble, one value per
/// replication; the time integral is a trapezoid on the grid.
pub fn cost_samples(p: &LQParams, feedback: &Feedback<'_>, m0_mean: &Vector, m0_cov: &Mat, mc: &MonteCarlo) -> Result<Vec<f64>> {
    p.validate()?;
    if mc.particles < 2 || mc.replications < 2 {
        return Err(Error::params("need at least two particles and two replications"));
    }
    let grid = TimeGrid::horizon(p.horizon, mc.steps)?;
    let h = grid.step();
    let n = p.n();
    mc.exec
        .map(mc.replications, |rep| -> Result<f64> {
            let path = BrownianPath::sample(&grid, n, mc.seed, rep as u64);
            let (mut particles, _) = spawn_particles(mc.particles, m0_mean, m0_cov, mc.seed, rep as u64)?;
            let mut y = empirical_mean(&particles.iter().map(|q| q.x.clone()).collect::<Vec<_>>());
            let mut cost = 0.0;
            for (k, db) in path.increments().iter().enumerate() {
                let t = grid.node(k);
                let w = if k == 0 { 0.5 * h } else { h };
                let common = db * p.beta;
                for q in &mut particles {
                    let v = feedback(&q.x, &y, t);
                    cost += w * running_cost(p, &q.x, &y, &v);
                    let dw = normal_vector(&mut q.rng, n, h.sqrt());
                    q.x = &q.x + dynamics(p, &q.x, &y, &v) * h + &p.sigma * dw + &common;
                }
                y = empirical_mean(&particles.iter().map(|q| q.x.clone()).collect::<Vec<_>>());
            }
            let t_end = grid.t_end();
            for q in &particles {
                let v = feedback(&q.x, &y, t_end);
                cost += 0.5 * h * running_cost(p, &q.x, &y, &v) + terminal_cost(p, &q.x, &y);
            }
            Ok(cost / mc.particles as f64)
        })
        .into_iter()
        .collect()
}

/// Mean objective and its standard error over replications.
pub fn estimate_cost(p: &LQParams, feedback: &Feedback<'_>, m0_mean: &Vector, m0_cov: &Mat, mc: &MonteCarlo) -> Result<Estimate> {
    Ok(Estimate::from_samples(&cost_samples(p, feedback, m0_mean, m0_cov, mc)?))
}

/// The optimal feedback `−R⁻¹Bᵀ(P(t)x + Σ(t,1)ȳ)` of a solved ansatz.
pub fn optimal_feedback(ans: &MasterAnsatz) -> Result<impl Fn(&Vector, &Vector, f64) -> Vector + Sync + '_> {
    let sigma = sigma_unit_mass(ans)?;
    let p = ans.params();
    let gain = p.r_inv() * p.b.transpose();
    let scale = ans.perturbation().sigma;
    Ok(move |x: &Vector, y: &Vector, t: f64| {
        let pt = ans.p_at(t).expect("time on grid");
        let st = sigma.eval_at(t).expect("time on grid") * scale;
        -(&gain * (pt * x + st * y))
    })
}
