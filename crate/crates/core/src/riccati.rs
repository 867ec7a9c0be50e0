//! Backward integration of matrix Riccati flows on a uniform time grid.
//!
//! Fields are written in the "backward" convention used by LQ value
//! functions, `dX/dt + X G + F X - X K X + C = 0` with a terminal condition,
//! and swept from `t_end` down to `t_start` with classical fixed-step RK4.

use crate::error::{Error, Result};
use crate::linalg::{max_abs, symmetrize_in_place, Mat};

/// Uniform grid `t_start = t_0 < t_1 < ... < t_N = t_end`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    num_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, num_steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_start >= t_end {
            return Err(Error::params(format!(
                "time grid needs t_start < t_end, got [{t_start}, {t_end}]"
            )));
        }
        if num_steps == 0 {
            return Err(Error::params("time grid needs at least one step"));
        }
        Ok(Self {
            t_start,
            t_end,
            num_steps,
        })
    }

    /// Grid on `[0, horizon]`.
    pub fn horizon(horizon: f64, num_steps: usize) -> Result<Self> {
        Self::new(0.0, horizon, num_steps)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn num_nodes(&self) -> usize {
        self.num_steps + 1
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / self.num_steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.num_steps {
            self.t_end
        } else {
            self.t_start + k as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.num_steps).map(move |k| self.node(k))
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_start && t <= self.t_end
    }

    pub fn check(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                t,
                start: self.t_start,
                end: self.t_end,
            })
        }
    }

    /// Interval index `k` with `t_k <= t <= t_{k+1}` and the local fraction.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        self.check(t)?;
        let s = (t - self.t_start) / self.step();
        let k = (s.floor() as usize).min(self.num_steps - 1);
        let frac = (s - k as f64).clamp(0.0, 1.0);
        Ok((k, frac))
    }

    /// Nearest node index to `t` (t must be on the grid up to rounding).
    pub fn nearest_node(&self, t: f64) -> Result<usize> {
        self.check(t)?;
        let s = (t - self.t_start) / self.step();
        Ok((s.round() as usize).min(self.num_steps))
    }

    /// Same span with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            num_steps: self.num_steps * factor.max(1),
            ..*self
        }
    }
}

/// Weights of the cubic Lagrange interpolant (or its derivative) through the
/// four nodes surrounding `t`, one-sided near the ends. Grids with fewer than
/// three steps fall back to linear interpolation.
fn lagrange_weights(grid: &TimeGrid, t: f64, derivative: bool) -> Result<Vec<(usize, f64)>> {
    let (k, frac) = grid.locate(t)?;
    let n = grid.num_steps();
    if !derivative && frac == 0.0 {
        return Ok(vec![(k, 1.0)]);
    }
    if n < 3 {
        let h = grid.step();
        return Ok(if derivative {
            vec![(k, -1.0 / h), (k + 1, 1.0 / h)]
        } else {
            vec![(k, 1.0 - frac), (k + 1, frac)]
        });
    }
    let first = k.saturating_sub(1).min(n - 3);
    let idx = [first, first + 1, first + 2, first + 3];
    let xs = idx.map(|i| grid.node(i));
    let mut weights = Vec::with_capacity(4);
    for j in 0..4 {
        let w = if derivative {
            let mut w = 0.0;
            for m in 0..4 {
                if m == j {
                    continue;
                }
                let mut term = 1.0 / (xs[j] - xs[m]);
                for l in 0..4 {
                    if l != j && l != m {
                        term *= (t - xs[l]) / (xs[j] - xs[l]);
                    }
                }
                w += term;
            }
            w
        } else {
            (0..4)
                .filter(|l| *l != j)
                .map(|l| (t - xs[l]) / (xs[j] - xs[l]))
                .product()
        };
        weights.push((idx[j], w));
    }
    Ok(weights)
}

/// Right-hand side of a matrix ODE `dX/dt = F(t, X)`.
pub trait RiccatiField: Sync {
    /// Shape of the state matrix.
    fn shape(&self) -> (usize, usize);

    fn rhs(&self, t: f64, x: &Mat) -> Mat;

    /// Projection applied after every RK stage when symmetrization is on.
    fn project(&self, _x: &mut Mat) {}
}

/// `dX/dt = -(X G + F X - X K X + C)` with constant coefficients.
#[derive(Clone, Debug)]
pub struct AffineQuadraticField {
    pub drift_left: Mat,
    pub drift_right: Mat,
    pub quadratic: Mat,
    pub inhomogeneous: Mat,
    pub symmetric: bool,
}

impl AffineQuadraticField {
    pub fn new(drift_left: Mat, drift_right: Mat, quadratic: Mat, inhomogeneous: Mat) -> Result<Self> {
        let n = inhomogeneous.nrows();
        for (name, m) in [
            ("drift_left", &drift_left),
            ("drift_right", &drift_right),
            ("quadratic", &quadratic),
            ("inhomogeneous", &inhomogeneous),
        ] {
            if m.shape() != (n, n) {
                return Err(Error::dims(format!(
                    "{name} is {:?}, expected {n}x{n}",
                    m.shape()
                )));
            }
        }
        Ok(Self {
            drift_left,
            drift_right,
            quadratic,
            inhomogeneous,
            symmetric: false,
        })
    }

    /// Standard LQ flow `dP/dt + P A + Aᵀ P - P K P + C = 0`.
    pub fn lq(a: &Mat, k: &Mat, c: &Mat) -> Result<Self> {
        let mut field = Self::new(a.transpose(), a.clone(), k.clone(), c.clone())?;
        field.symmetric = true;
        Ok(field)
    }

    pub fn zero(n: usize) -> Self {
        Self {
            drift_left: Mat::zeros(n, n),
            drift_right: Mat::zeros(n, n),
            quadratic: Mat::zeros(n, n),
            inhomogeneous: Mat::zeros(n, n),
            symmetric: false,
        }
    }
}

impl RiccatiField for AffineQuadraticField {
    fn shape(&self) -> (usize, usize) {
        self.inhomogeneous.shape()
    }

    fn rhs(&self, _t: f64, x: &Mat) -> Mat {
        let xk = x * &self.quadratic;
        -(x * &self.drift_right + &self.drift_left * x - xk * x + &self.inhomogeneous)
    }

    fn project(&self, x: &mut Mat) {
        if self.symmetric {
            symmetrize_in_place(x);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IntegrateOptions {
    /// Any entry larger than this in magnitude aborts with `BlowUp`.
    pub blowup_bound: f64,
    /// Apply the field's projection after each RK stage.
    pub symmetrize: bool,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            blowup_bound: 1e12,
            symmetrize: true,
        }
    }
}

/// Node values of a matrix-valued function on a [`TimeGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    grid: TimeGrid,
    values: Vec<Mat>,
}

impl RiccatiSolution {
    pub fn from_values(grid: TimeGrid, values: Vec<Mat>) -> Result<Self> {
        if values.len() != grid.num_nodes() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.num_nodes()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn node(&self, k: usize) -> &Mat {
        &self.values[k]
    }

    pub fn initial(&self) -> &Mat {
        &self.values[0]
    }

    pub fn terminal(&self) -> &Mat {
        &self.values[self.grid.num_steps()]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    /// Local cubic Lagrange interpolation; node values are returned exactly.
    pub fn eval_at(&self, t: f64) -> Result<Mat> {
        self.combine_nodes(lagrange_weights(&self.grid, t, false)?)
    }

    /// Time derivative from the local cubic Lagrange interpolant.
    pub fn derivative_at(&self, t: f64) -> Result<Mat> {
        self.combine_nodes(lagrange_weights(&self.grid, t, true)?)
    }

    fn combine_nodes(&self, weights: Vec<(usize, f64)>) -> Result<Mat> {
        if let [(k, w)] = weights[..] {
            if w == 1.0 {
                return Ok(self.values[k].clone());
            }
        }
        let (r, c) = self.shape();
        let mut out = Mat::zeros(r, c);
        for (k, w) in weights {
            out += &self.values[k] * w;
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(&Mat) -> Mat) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(f).collect(),
        }
    }

    /// Column block `[.., col .. col + width]` of every node value.
    pub fn block(&self, col: usize, width: usize) -> Self {
        let rows = self.values[0].nrows();
        self.map(|m| m.view((0, col), (rows, width)).into_owned())
    }
}

fn check_finite(x: &Mat, t: f64, bound: f64) -> Result<()> {
    let magnitude = max_abs(x);
    if !magnitude.is_finite() || magnitude > bound || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp {
            t,
            magnitude,
            bound,
        });
    }
    Ok(())
}

/// RK4 sweep from `grid.t_end()` down to `grid.t_start()` with default options.
pub fn integrate_backward(
    field: &dyn RiccatiField,
    terminal: &Mat,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    integrate_backward_with(field, terminal, grid, IntegrateOptions::default())
}

pub fn integrate_backward_with(
    field: &dyn RiccatiField,
    terminal: &Mat,
    grid: &TimeGrid,
    options: IntegrateOptions,
) -> Result<RiccatiSolution> {
    if field.shape() != terminal.shape() {
        return Err(Error::dims(format!(
            "terminal is {:?} but field expects {:?}",
            terminal.shape(),
            field.shape()
        )));
    }
    check_finite(terminal, grid.t_end(), options.blowup_bound)?;

    let project = |mut m: Mat| {
        if options.symmetrize {
            field.project(&mut m);
        }
        m
    };

    let n = grid.num_steps();
    let h = grid.step();
    let mut values = vec![Mat::zeros(0, 0); n + 1];
    values[n] = terminal.clone();
    let mut x = terminal.clone();
    // Kahan compensation of the accumulated increments, so that rounding
    // stays below the RK4 truncation error even at 10⁴ steps.
    let mut carry = Mat::zeros(x.nrows(), x.ncols());
    for k in (0..n).rev() {
        let t = grid.node(k + 1);
        let tm = t - 0.5 * h;
        let k1 = field.rhs(t, &x);
        let k2 = field.rhs(tm, &project(&x - &k1 * (0.5 * h)));
        let k3 = field.rhs(tm, &project(&x - &k2 * (0.5 * h)));
        let k4 = field.rhs(grid.node(k), &project(&x - &k3 * h));
        let increment = -(k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0) - &carry;
        let next = &x + &increment;
        carry = (&next - &x) - increment;
        x = project(next);
        check_finite(&x, grid.node(k), options.blowup_bound)?;
        values[k] = x.clone();
    }
    Ok(RiccatiSolution { grid: *grid, values })
}

/// Scalar node series on a grid, e.g. tail integrals of trace terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarSeries {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl ScalarSeries {
    pub fn from_values(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_nodes() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.num_nodes()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.num_nodes()],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval_at(&self, t: f64) -> Result<f64> {
        Ok(lagrange_weights(&self.grid, t, false)?
            .into_iter()
            .map(|(k, w)| self.values[k] * w)
            .sum())
    }

    pub fn derivative_at(&self, t: f64) -> Result<f64> {
        Ok(lagrange_weights(&self.grid, t, true)?
            .into_iter()
            .map(|(k, w)| self.values[k] * w)
            .sum())
    }

    /// Pointwise linear combination `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &ScalarSeries, b: f64) -> Self {
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|x| a * x).collect(),
        }
    }
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * f(0.5 * (a + b)) + fb)
}

/// Composite Simpson approximation of `∫_t^{t_end} f(s) ds` on the grid nodes.
///
/// An odd number of node intervals is closed with a 3/8 panel; a partial
/// interval `[t, t_k]` (t off-grid) uses a single Simpson panel.
pub fn integrate_scalar_quadrature(f: &dyn Fn(f64) -> f64, grid: &TimeGrid, t: f64) -> Result<f64> {
    grid.check(t)?;
    let h = grid.step();
    let n = grid.num_steps();
    let s = (t - grid.t_start()) / h;
    let mut k = s.ceil() as usize;
    if k > n {
        k = n;
    }
    // snap when t sits on a node up to rounding
    if (s - s.round()).abs() < 1e-9 {
        k = s.round() as usize;
    }
    let mut total = 0.0;
    let tk = grid.node(k);
    if tk > t {
        total += simpson(f, t, tk, f(t), f(tk));
    }

    let m = n - k;
    if m == 0 {
        return Ok(total);
    }
    let fv: Vec<f64> = (k..=n).map(|i| f(grid.node(i))).collect();
    if m == 1 {
        return Ok(total + simpson(f, grid.node(k), grid.node(n), fv[0], fv[1]));
    }
    let mut start = 0;
    if m % 2 == 1 {
        total += 3.0 * h / 8.0 * (fv[0] + 3.0 * fv[1] + 3.0 * fv[2] + fv[3]);
        start = 3;
    }
    let mut acc = 0.0;
    let mut i = start;
    while i + 2 <= m {
        acc += fv[i] + 4.0 * fv[i + 1] + fv[i + 2];
        i += 2;
    }
    Ok(total + acc * h / 3.0)
}

/// Tail integrals `I_k = ∫_{t_k}^{t_end} f(s) ds` at every node, one Simpson
/// panel (with a midpoint evaluation) per grid interval.
pub fn tail_integrals(f: &dyn Fn(f64) -> f64, grid: &TimeGrid) -> ScalarSeries {
    let n = grid.num_steps();
    let mut values = vec![0.0; n + 1];
    let mut f_right = f(grid.node(n));
    for k in (0..n).rev() {
        let (a, b) = (grid.node(k), grid.node(k + 1));
        let f_left = f(a);
        values[k] = values[k + 1] + simpson(f, a, b, f_left, f_right);
        f_right = f_left;
    }
    ScalarSeries { grid: *grid, values }
}
