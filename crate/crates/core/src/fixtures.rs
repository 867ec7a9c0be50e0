//! Reference problem instances used by tests, benches and example configs.

use crate::linalg::{mat, Mat};
use crate::lq_model::LQParams;

/// Scalar problem with `Q + Q̄ = 1`, `B = R = 1` and no coupling through the
/// mean (`S = S_T = Ā = 0`), so that `P(t) = tanh(T − t)` and `Σ = Γ = 0`.
pub fn lq_scalar_benchmark() -> LQParams {
    let one = |v: f64| Mat::from_element(1, 1, v);
    LQParams {
        a: one(0.0),
        a_bar: one(0.0),
        b: one(1.0),
        q: one(0.0),
        q_bar: one(1.0),
        q_t: one(0.0),
        q_bar_t: one(0.0),
        s: one(0.0),
        s_t: one(0.0),
        r: one(1.0),
        sigma: one(0.5),
        beta: 0.3,
        horizon: 1.0,
    }
}

/// Two-dimensional instance where every coupling is active and `S`, `Ā` are
/// not symmetric.
pub fn lq_coupled_2d() -> LQParams {
    LQParams {
        a: mat(&[&[0.1, 0.2], &[-0.3, -0.2]]),
        a_bar: mat(&[&[0.2, 0.0], &[0.1, -0.1]]),
        b: mat(&[&[1.0, 0.0], &[0.5, 1.0]]),
        q: mat(&[&[1.0, 0.1], &[0.1, 0.5]]),
        q_bar: mat(&[&[0.8, 0.2], &[0.2, 0.6]]),
        q_t: mat(&[&[0.5, 0.0], &[0.0, 0.3]]),
        q_bar_t: mat(&[&[0.4, 0.1], &[0.1, 0.7]]),
        s: mat(&[&[0.5, 0.3], &[-0.2, 0.4]]),
        s_t: mat(&[&[0.6, -0.2], &[0.3, 0.5]]),
        r: mat(&[&[1.0, 0.2], &[0.2, 2.0]]),
        sigma: mat(&[&[0.3, 0.0], &[0.1, 0.2]]),
        beta: 0.4,
        horizon: 1.0,
    }
}

/// One-dimensional instance with non-zero `A`, `Ā`, `S`, `S_T`.
pub fn lq_coupled_1d() -> LQParams {
    let one = |v: f64| Mat::from_element(1, 1, v);
    LQParams {
        a: one(0.2),
        a_bar: one(-0.3),
        b: one(1.0),
        q: one(0.5),
        q_bar: one(1.0),
        q_t: one(0.2),
        q_bar_t: one(0.6),
        s: one(0.7),
        s_t: one(0.4),
        r: one(1.5),
        sigma: one(0.4),
        beta: 0.5,
        horizon: 1.0,
    }
}
