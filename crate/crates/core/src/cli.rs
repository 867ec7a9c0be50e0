//! Experiment runner behind the `mfgkit` binary.
//!
//! A config file is TOML restricted to scalar, list and matrix values under
//! dotted keys (`model.A = [[0.0]]`, `grid.steps = 1000`, `run.samples = 100`).
//! Every experiment consumes the keys it understands; anything left over is an
//! error naming the key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::finite_nash::{
    drift_convention_gap, lattice_states, nash_system_residual, prop61_first_identity, prop61_second_identity,
    prop61_third_identity, BilinearKernel, DriftEvaluation, EmpiricalMeasure, QuadraticFunctional,
};
use crate::fixtures;
use crate::linalg::{from_rows, vector, Mat, Vector};
use crate::lq_model::{solve_master_mfc, solve_master_mfg, Kind, LQParams, MasterAnsatz, Perturbation};
use crate::master_residual::{gamma_mass_fd_defect, random_samples, residual_mfc, residual_mfg, symmetry_defect, ResidualReport};
use crate::mckean_vlasov::{backward_r, fbsde_table, hjb_step_residual, scalar_s, simulate_conditional_mean, BrownianPath, Estimate};
use crate::riccati::TimeGrid;
use crate::systemic_risk::{
    b_term, mass_defect, mean_deviation_samples, residual_systemic, simulate_banks, solve_systemic, SystemicParams,
};
use crate::table::{format_float, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    RiccatiBench,
    MfcVerify,
    MfgVerify,
    FbsdeCheck,
    FiniteNashSweep,
    Prop61,
    Systemic,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::RiccatiBench => "riccati-bench",
            Experiment::MfcVerify => "mfc-verify",
            Experiment::MfgVerify => "mfg-verify",
            Experiment::FbsdeCheck => "fbsde-check",
            Experiment::FiniteNashSweep => "finite-nash-sweep",
            Experiment::Prop61 => "prop61",
            Experiment::Systemic => "systemic",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mfgkit", version, about = "Master-equation solvers and verification experiments for linear-quadratic mean field problems")]
pub struct Args {
    pub experiment: Experiment,
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `out_dir` from the config (default `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What an experiment runs on, after parsing and validation.
#[derive(Clone, Debug, PartialEq)]
pub enum Plan {
    RiccatiBench { model: LQParams, steps: Vec<usize>, reference_factor: usize },
    Verify { kind: Kind, model: LQParams, grid: TimeGrid, samples: usize, masses: Vec<f64>, x_range: f64 },
    Fbsde { model: LQParams, grid: TimeGrid, y0: Vector },
    FiniteNash { model: LQParams, grid: TimeGrid, players: Vec<usize>, t: f64 },
    Prop61 { sizes: Vec<usize>, diffusion: f64 },
    Systemic { params: SystemicParams, grid: TimeGrid, banks: usize, replications: usize, y0: f64, spread: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub plan: Plan,
    /// Sorted `key = value` lines of the source config, echoed into outputs.
    pub echo: Vec<String>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

struct Keys {
    map: BTreeMap<String, toml::Value>,
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other);
            }
        }
    }
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(config_err(format!("`{key}` must be a number"))),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(config_err(format!("`{key}` must be a non-negative integer"))),
    }
}

fn as_list<'a>(key: &str, v: &'a toml::Value) -> Result<&'a Vec<toml::Value>> {
    v.as_array().ok_or_else(|| config_err(format!("`{key}` must be a list")))
}

impl Keys {
    fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let mut map = BTreeMap::new();
        flatten("", table, &mut map);
        Ok(Self { map })
    }

    fn echo(&self) -> Vec<String> {
        self.map.iter().map(|(k, v)| format!("{k} = {v}")).collect()
    }

    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.map.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<toml::Value> {
        self.take(key).ok_or_else(|| config_err(format!("missing key `{key}`")))
    }

    fn f64(&mut self, key: &str) -> Result<f64> {
        as_f64(key, &self.require(key)?)
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        self.take(key).map_or(Ok(default), |v| as_f64(key, &v))
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        as_usize(key, &self.require(key)?)
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        self.take(key).map_or(Ok(default), |v| as_usize(key, &v))
    }

    fn usize_list_or(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(v) => as_list(key, &v)?.iter().map(|x| as_usize(key, x)).collect(),
        }
    }

    fn f64_list(key: &str, v: &toml::Value) -> Result<Vec<f64>> {
        as_list(key, v)?.iter().map(|x| as_f64(key, x)).collect()
    }

    fn f64_list_or(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(v) => Self::f64_list(key, &v),
        }
    }

    fn matrix(&mut self, key: &str) -> Result<Option<Mat>> {
        let Some(v) = self.take(key) else { return Ok(None) };
        let rows = as_list(key, &v)?.iter().map(|r| Self::f64_list(key, r)).collect::<Result<Vec<_>>>()?;
        from_rows(&rows).map(Some).map_err(|e| config_err(format!("`{key}`: {e}")))
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(config_err(format!("`{key}` must be a string"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(k) => Err(config_err(format!("unknown key `{k}`"))),
        }
    }
}

fn lq_model(keys: &mut Keys) -> Result<LQParams> {
    let preset = keys.string("model.preset")?;
    let mut p = match preset.as_deref() {
        None => None,
        Some("scalar-benchmark") => Some(fixtures::lq_scalar_benchmark()),
        Some("coupled-1d") => Some(fixtures::lq_coupled_1d()),
        Some("coupled-2d") => Some(fixtures::lq_coupled_2d()),
        Some(other) => return Err(config_err(format!("unknown `model.preset` \"{other}\""))),
    };
    let mut field = |key: &str, slot: fn(&mut LQParams) -> &mut Mat, p: &mut Option<LQParams>| -> Result<Option<Mat>> {
        let m = keys.matrix(key)?;
        match (m, p.as_mut()) {
            (Some(m), Some(p)) => {
                *slot(p) = m;
                Ok(None)
            }
            (m, _) => Ok(m),
        }
    };
    type Slot = fn(&mut LQParams) -> &mut Mat;
    let slots: [(&str, Slot); 11] = [
        ("model.A", |p| &mut p.a),
        ("model.A_bar", |p| &mut p.a_bar),
        ("model.B", |p| &mut p.b),
        ("model.Q", |p| &mut p.q),
        ("model.Q_bar", |p| &mut p.q_bar),
        ("model.Q_T", |p| &mut p.q_t),
        ("model.Q_bar_T", |p| &mut p.q_bar_t),
        ("model.S", |p| &mut p.s),
        ("model.S_T", |p| &mut p.s_t),
        ("model.R", |p| &mut p.r),
        ("model.sigma", |p| &mut p.sigma),
    ];
    let mut explicit = Vec::new();
    for (key, slot) in slots {
        explicit.push((key, slot, field(key, slot, &mut p)?));
    }
    let beta = keys.take("model.beta").map(|v| as_f64("model.beta", &v)).transpose()?;
    let horizon = keys.take("model.T").map(|v| as_f64("model.T", &v)).transpose()?;
    let mut p = match p {
        Some(p) => p,
        None => {
            let missing = explicit.iter().find(|(_, _, m)| m.is_none()).map(|(k, _, _)| *k);
            let missing = missing.or(beta.is_none().then_some("model.beta")).or(horizon.is_none().then_some("model.T"));
            if let Some(k) = missing {
                return Err(config_err(format!("missing key `{k}` (or set `model.preset`)")));
            }
            let mut p = LQParams::zeros(1, 1, 1.0);
            for (_, slot, m) in explicit {
                *slot(&mut p) = m.expect("checked above");
            }
            p
        }
    };
    if let Some(b) = beta {
        p.beta = b;
    }
    if let Some(t) = horizon {
        p.horizon = t;
    }
    p.validate().map_err(|e| config_err(format!("model: {e}")))?;
    Ok(p)
}

fn systemic_model(keys: &mut Keys) -> Result<SystemicParams> {
    let mut p = SystemicParams {
        alpha: keys.f64("model.alpha")?,
        lambda: keys.f64("model.lambda")?,
        mu: keys.f64("model.mu")?,
        c: 0.0,
        sigma: keys.f64("model.sigma")?,
        beta: keys.f64("model.beta")?,
        horizon: keys.f64("model.T")?,
    };
    p.c = match keys.require("model.c")? {
        toml::Value::String(s) if s == "fixed-point" => p.fixed_point(),
        v => as_f64("model.c", &v)?,
    };
    p.validate().map_err(|e| config_err(format!("model: {e}")))?;
    Ok(p)
}

fn grid(keys: &mut Keys, horizon: f64) -> Result<TimeGrid> {
    let steps = keys.usize("grid.steps")?;
    TimeGrid::horizon(horizon, steps).map_err(|e| config_err(format!("grid: {e}")))
}

fn nonempty<T>(key: &str, v: Vec<T>) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(config_err(format!("`{key}` must not be empty")));
    }
    Ok(v)
}

/// Parses config text for `experiment`. `seed` and `out` override the file.
pub fn parse_config(text: &str, experiment: Experiment, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut keys = Keys::parse(text)?;
    let echo = keys.echo();
    if let Some(name) = keys.string("experiment")? {
        if name != experiment.name() {
            return Err(config_err(format!("config is for `{name}`, not `{}`", experiment.name())));
        }
    }
    let file_seed = match keys.take("seed") {
        None => 0,
        Some(toml::Value::Integer(i)) => i as u64,
        Some(_) => return Err(config_err("`seed` must be an integer")),
    };
    let file_out = keys.string("out_dir")?.map(PathBuf::from);
    let plan = match experiment {
        Experiment::RiccatiBench => Plan::RiccatiBench {
            model: lq_model(&mut keys)?,
            steps: nonempty("run.steps", keys.usize_list_or("run.steps", &[1000, 2000, 10_000])?)?,
            reference_factor: keys.usize_or("run.reference_factor", 8)?,
        },
        Experiment::MfcVerify | Experiment::MfgVerify => {
            let model = lq_model(&mut keys)?;
            Plan::Verify {
                kind: if experiment == Experiment::MfcVerify { Kind::Mfc } else { Kind::Mfg },
                grid: grid(&mut keys, model.horizon)?,
                model,
                samples: keys.usize_or("run.samples", 100)?,
                masses: nonempty("run.m1_samples", keys.f64_list_or("run.m1_samples", &[0.5, 1.0, 2.0])?)?,
                x_range: keys.f64_or("run.x_range", 2.0)?,
            }
        }
        Experiment::FbsdeCheck => {
            let model = lq_model(&mut keys)?;
            let y0 = Keys::f64_list("run.y0", &keys.require("run.y0")?)?;
            if y0.len() != model.n() {
                return Err(config_err("`run.y0` must have the state dimension"));
            }
            Plan::Fbsde { grid: grid(&mut keys, model.horizon)?, model, y0: vector(&y0) }
        }
        Experiment::FiniteNashSweep => {
            let model = lq_model(&mut keys)?;
            let players = nonempty("run.players", keys.usize_list_or("run.players", &[2, 8, 32])?)?;
            if players.iter().any(|n| *n < 2) {
                return Err(config_err("`run.players` entries must be >= 2"));
            }
            Plan::FiniteNash { grid: grid(&mut keys, model.horizon)?, t: keys.f64_or("run.t", 0.37)?, model, players }
        }
        Experiment::Prop61 => {
            let sizes = nonempty("run.K", keys.usize_list_or("run.K", &[3, 6, 12, 24])?)?;
            if sizes.iter().any(|k| *k < 2) {
                return Err(config_err("`run.K` entries must be >= 2"));
            }
            Plan::Prop61 { sizes, diffusion: keys.f64_or("run.a", 1.0)? }
        }
        Experiment::Systemic => {
            let params = systemic_model(&mut keys)?;
            let banks = keys.usize("run.banks")?;
            if banks < 2 {
                return Err(config_err("`run.banks` must be >= 2"));
            }
            Plan::Systemic {
                grid: grid(&mut keys, params.horizon)?,
                params,
                banks,
                replications: keys.usize_or("run.replications", 200)?,
                y0: keys.f64_or("run.y0", 0.0)?,
                spread: keys.f64_or("run.spread", 1.0)?,
            }
        }
    };
    keys.finish()?;
    Ok(ExperimentConfig {
        experiment,
        seed: seed.unwrap_or(file_seed),
        out_dir: out.or(file_out).unwrap_or_else(|| PathBuf::from("out")),
        plan,
        echo,
    })
}

fn push_matrix(s: &mut String, name: &str, m: &Mat) {
    let _ = write!(s, "{name}={}x{}:", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let _ = write!(s, "{},", format_float(m[(i, j)]));
        }
    }
    s.push(';');
}

/// SHA-256 of a canonical rendering of the resolved model.
pub fn model_hash(plan: &Plan) -> String {
    let mut s = String::new();
    match plan {
        Plan::RiccatiBench { model, .. } | Plan::Verify { model, .. } | Plan::Fbsde { model, .. } | Plan::FiniteNash { model, .. } => {
            s.push_str("lq;");
            for (name, m) in [
                ("A", &model.a),
                ("A_bar", &model.a_bar),
                ("B", &model.b),
                ("Q", &model.q),
                ("Q_bar", &model.q_bar),
                ("Q_T", &model.q_t),
                ("Q_bar_T", &model.q_bar_t),
                ("S", &model.s),
                ("S_T", &model.s_t),
                ("R", &model.r),
                ("sigma", &model.sigma),
            ] {
                push_matrix(&mut s, name, m);
            }
            let _ = write!(s, "beta={};T={};", format_float(model.beta), format_float(model.horizon));
        }
        Plan::Prop61 { diffusion, .. } => {
            let _ = write!(s, "prop61;a={};", format_float(*diffusion));
        }
        Plan::Systemic { params: p, .. } => {
            s.push_str("systemic;");
            for v in [p.alpha, p.lambda, p.mu, p.c, p.sigma, p.beta, p.horizon] {
                let _ = write!(s, "{},", format_float(v));
            }
        }
    }
    Sha256::digest(s.as_bytes()).iter().fold(String::new(), |mut h, b| {
        let _ = write!(h, "{b:02x}");
        h
    })
}

fn plan_grid(plan: &Plan) -> Option<&TimeGrid> {
    match plan {
        Plan::Verify { grid, .. } | Plan::Fbsde { grid, .. } | Plan::FiniteNash { grid, .. } | Plan::Systemic { grid, .. } => Some(grid),
        Plan::RiccatiBench { .. } | Plan::Prop61 { .. } => None,
    }
}

fn header(cfg: &ExperimentConfig) -> Vec<String> {
    let grid = match plan_grid(&cfg.plan) {
        Some(g) => format!("[{}, {}] steps={}", g.t_start(), g.t_end(), g.num_steps()),
        None => "none".to_string(),
    };
    let mut lines = vec![
        format!("experiment={}", cfg.experiment.name()),
        format!("seed={}", cfg.seed),
        format!("grid={grid}"),
        format!("model_hash=sha256:{}", model_hash(&cfg.plan)),
    ];
    lines.extend(cfg.echo.iter().map(|l| format!("config: {l}")));
    lines
}

struct Writer<'a> {
    cfg: &'a ExperimentConfig,
    written: Vec<PathBuf>,
}

impl Writer<'_> {
    fn csv(&mut self, name: &str, table: &Table) -> Result<()> {
        let path = self.cfg.out_dir.join(name);
        table.write_csv(BufWriter::new(File::create(&path)?), &header(self.cfg))?;
        self.written.push(path);
        Ok(())
    }

    /// Flat `key = value` summary with the same comment header.
    fn summary(&mut self, name: &str, entries: &[(&str, f64)]) -> Result<()> {
        let path = self.cfg.out_dir.join(name);
        let mut out = BufWriter::new(File::create(&path)?);
        for c in header(self.cfg) {
            writeln!(out, "# {c}")?;
        }
        for (k, v) in entries {
            writeln!(out, "{k} = {}", format_float(*v))?;
        }
        out.flush()?;
        self.written.push(path);
        Ok(())
    }
}

fn solve(kind: Kind, model: &LQParams, grid: &TimeGrid, masses: &[f64]) -> Result<MasterAnsatz> {
    match kind {
        Kind::Mfc => solve_master_mfc(model, grid, masses),
        Kind::Mfg => solve_master_mfg(model, grid, masses),
    }
}

fn residual(ans: &MasterAnsatz, samples: &[crate::master_residual::Sample]) -> Result<ResidualReport> {
    match ans.kind() {
        Kind::Mfc => residual_mfc(ans, samples),
        Kind::Mfg => residual_mfg(ans, samples),
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
}

fn run_riccati_bench(w: &mut Writer<'_>, model: &LQParams, steps: &[usize], factor: usize) -> Result<()> {
    let p0 = |n: usize| -> Result<Mat> {
        let grid = TimeGrid::horizon(model.horizon, n)?;
        Ok(solve_master_mfc(model, &grid, &[1.0])?.p_solution().initial().clone())
    };
    let finest = *steps.iter().max().expect("non-empty");
    let reference = p0(finest * factor.max(2))?;
    let n = model.n();
    let mut header = vec!["steps".to_string(), "h".to_string()];
    for i in 0..n {
        for j in 0..n {
            header.push(format!("p0_{i}{j}"));
        }
    }
    header.extend(["error".to_string(), "ratio".to_string()]);
    let mut table = Table::new(header);
    let mut previous: Option<f64> = None;
    for &s in steps {
        let p = p0(s)?;
        let err = crate::linalg::max_abs_diff(&p, &reference);
        let mut row = vec![s as f64, model.horizon / s as f64];
        row.extend(p.transpose().iter());
        row.push(err);
        row.push(previous.map_or(f64::NAN, |e| e / err));
        table.push(row)?;
        previous = Some(err);
    }
    w.csv("riccati_bench.csv", &table)
}

fn run_verify(w: &mut Writer<'_>, kind: Kind, model: &LQParams, grid: &TimeGrid, count: usize, masses: &[f64], x_range: f64) -> Result<()> {
    let ans = solve(kind, model, grid, masses)?;
    let samples = random_samples(model.n(), count, masses, model.horizon, x_range, w.cfg.seed);
    let report = residual(&ans, &samples)?;
    let perturbed = residual(&ans.perturbed(Perturbation { p: 1.01, ..Default::default() }), &samples)?;
    let mom = samples.first().map(|s| s.mom.clone()).ok_or_else(|| config_err("`run.samples` must be >= 1"))?;
    let name = w.cfg.experiment.name().replace('-', "_");
    w.csv(&format!("{name}_residual.csv"), &report.to_table())?;
    w.summary(
        &format!("{name}_summary.txt"),
        &[
            ("samples", count as f64),
            ("max_abs_residual", report.max_abs),
            ("max_abs_residual_p_perturbed_1pct", perturbed.max_abs),
            ("symmetry_defect_mid_horizon", symmetry_defect(&ans, &mom, 0.5 * model.horizon)?),
            ("gamma_mass_fd_defect_m1_1", gamma_mass_fd_defect(&ans, 1.0)?),
        ],
    )
}

fn run_fbsde(w: &mut Writer<'_>, model: &LQParams, grid: &TimeGrid, y0: &Vector) -> Result<()> {
    let ans = solve_master_mfc(model, grid, &[1.0])?;
    let path = BrownianPath::sample(grid, model.n(), w.cfg.seed, 0);
    let y = simulate_conditional_mean(&ans, y0, &path)?;
    let r = backward_r(&ans, &y, &path)?;
    let s = scalar_s(&ans, &y, &path)?;
    let fam = ans.family(1.0)?;
    let sup = r
        .iter()
        .zip(fam.sigma.values())
        .zip(&y)
        .map(|((r, sig), y)| (r - sig * y).amax())
        .fold(0.0, f64::max);
    let probes: Vec<Vector> = (0..model.n()).map(|i| Vector::from_fn(model.n(), |j, _| if i == j { 1.0 } else { 0.0 })).collect();
    w.csv("fbsde.csv", &fbsde_table(grid, &y, &r, &s))?;
    w.summary(
        "fbsde_summary.txt",
        &[
            ("sup_r_minus_sigma_y", sup),
            ("hjb_step_residual", hjb_step_residual(&ans, &y, &path, &probes)?),
        ],
    )
}

fn run_finite_nash(w: &mut Writer<'_>, model: &LQParams, grid: &TimeGrid, players: &[usize], t: f64) -> Result<()> {
    let ans = solve_master_mfg(model, grid, &[1.0])?;
    let mut table = Table::new(["players", "max_residual_player_measure", "max_residual_reference_measure", "max_convention_gap"]);
    for &n in players {
        let states = lattice_states(n, model.n());
        table.push(vec![
            n as f64,
            max_abs(&nash_system_residual(&ans, &states, t, DriftEvaluation::PlayerMeasure)?),
            max_abs(&nash_system_residual(&ans, &states, t, DriftEvaluation::ReferenceMeasure)?),
            max_abs(&drift_convention_gap(&ans, &states, t)?),
        ])?;
    }
    w.csv("finite_nash.csv", &table)
}

/// Equally spaced atoms in `[1, 3]` with the bilinear kernel `Γ(u,v) = uv`.
pub fn prop61_testbed(k: usize) -> Result<EmpiricalMeasure> {
    let points = (0..k).map(|j| vector(&[1.0 + 2.0 * j as f64 / (k - 1) as f64])).collect();
    EmpiricalMeasure::normalized(points)
}

fn run_prop61(w: &mut Writer<'_>, sizes: &[usize], diffusion: f64) -> Result<()> {
    let kernel = BilinearKernel(Mat::identity(1, 1));
    let f = QuadraticFunctional { kernel: &kernel };
    let a = Mat::from_element(1, 1, diffusion);
    let mut table = Table::new([
        "K", "first_lhs", "first_rhs", "second_lhs", "second_rhs", "third_lhs", "third_rhs", "third_gap", "predicted_gap",
    ]);
    for &k in sizes {
        let m = prop61_testbed(k)?;
        let (l1, r1) = prop61_first_identity(&f, &m, &|_| vector(&[1.0]));
        let (l2, r2) = prop61_second_identity(&f, &m);
        let third = prop61_third_identity(&f, &m, &a)?;
        table.push(vec![k as f64, l1, r1, l2, r2, third.lhs, third.rhs, third.gap, third.predicted_gap])?;
    }
    w.csv("prop61.csv", &table)
}

#[allow(clippy::too_many_arguments)]
fn run_systemic(w: &mut Writer<'_>, params: &SystemicParams, grid: &TimeGrid, banks: usize, replications: usize, y0: f64, spread: f64) -> Result<()> {
    let sol = solve_systemic(params, grid)?;
    let x0: Vec<f64> = (0..banks).map(|j| y0 + spread * (-1.0 + 2.0 * j as f64 / (banks - 1) as f64)).collect();
    let run = simulate_banks(&sol, &x0, w.cfg.seed, 0, Exec::Parallel)?;
    let samples = random_samples(1, 100, &[0.5, 1.0, 2.0], params.horizon, 2.0, w.cfg.seed);
    let report = residual_systemic(&sol, &samples)?;
    let mut table = report.to_table();
    table.header.push("mass_defect".into());
    for (row, s) in table.rows.iter_mut().zip(&samples) {
        row.push(mass_defect(&sol, s)?);
    }
    let unit_mass = samples.iter().zip(&report.residuals).filter(|(s, _)| s.mom.m1 == 1.0).map(|(_, r)| r.abs()).fold(0.0, f64::max);
    let defect_gap = samples
        .iter()
        .zip(&report.residuals)
        .map(|(s, r)| mass_defect(&sol, s).map(|d| (r - d).abs()))
        .collect::<Result<Vec<_>>>()?;
    let dev = if replications >= 2 {
        Estimate::from_samples(&mean_deviation_samples(&sol, &x0, w.cfg.seed, replications, Exec::Parallel)?)
    } else {
        Estimate { mean: f64::NAN, std_err: f64::NAN }
    };
    let p_sup_dev = sol.p_solution().values().iter().map(|m| (m[(0, 0)] - params.c).abs()).fold(0.0, f64::max);
    let b = b_term(&sol, 1.0, 1.0, 0.0, 0.0)?;
    w.csv("systemic_path.csv", &run.to_table(grid))?;
    w.csv("systemic_residual.csv", &table)?;
    w.summary(
        "systemic_summary.txt",
        &[
            ("c_star", params.fixed_point()),
            ("P_0", sol.p_at(0.0)?),
            ("R_1_0", sol.r_at(1.0, 0.0)?),
            ("sup_abs_P_minus_terminal", p_sup_dev),
            ("max_abs_residual_unit_mass", unit_mass),
            ("max_abs_residual_minus_mass_defect", max_abs(&defect_gap)),
            ("mean_deviation_sq", dev.mean),
            ("mean_deviation_sq_std_err", dev.std_err),
            ("mean_deviation_sq_expected", params.sigma * params.sigma * params.horizon / banks as f64),
            ("b_term_x1_y0_t0", b.from_definition),
            ("b_term_without_p_factor_x1_y0_t0", b.without_p_factor),
        ],
    )
}

/// Runs the experiment and returns the files written.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = Writer { cfg, written: Vec::new() };
    match &cfg.plan {
        Plan::RiccatiBench { model, steps, reference_factor } => run_riccati_bench(&mut w, model, steps, *reference_factor)?,
        Plan::Verify { kind, model, grid, samples, masses, x_range } => run_verify(&mut w, *kind, model, grid, *samples, masses, *x_range)?,
        Plan::Fbsde { model, grid, y0 } => run_fbsde(&mut w, model, grid, y0)?,
        Plan::FiniteNash { model, grid, players, t } => run_finite_nash(&mut w, model, grid, players, *t)?,
        Plan::Prop61 { sizes, diffusion } => run_prop61(&mut w, sizes, *diffusion)?,
        Plan::Systemic { params, grid, banks, replications, y0, spread } => {
            run_systemic(&mut w, params, grid, *banks, *replications, *y0, *spread)?
        }
    }
    Ok(w.written)
}

/// Caps the global thread pool at `MFGKIT_THREADS` if set.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MFGKIT_THREADS") else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| config_err(format!("MFGKIT_THREADS must be a positive integer, got \"{value}\"")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config_err(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

/// 0 ok, 1 I/O, 2 config, 3 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Csv(_) => 1,
        _ => 3,
    }
}

pub fn load(args: &Args) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config).map_err(|e| config_err(format!("{}: {e}", args.config.display())))?;
    parse_config(&text, args.experiment, args.seed, args.out.clone())
}

/// Full CLI flow; returns the process exit code.
pub fn main_with(args: &Args) -> i32 {
    let result = configure_threads().and_then(|()| load(args)).and_then(|cfg| run(&cfg));
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("mfgkit {}: {e}", args.experiment.name());
            exit_code(&e)
        }
    }
}

/// Path of `name` in the crate's bundled config directory.
pub fn bundled_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}
