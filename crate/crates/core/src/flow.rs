//! Deterministic flow of the reduced system and the state-transition
//! matrices of its linearization.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dynamics, State3};

/// Uniform grid `t_k = k * T / steps`, `k = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    /// Grid on `[0, horizon]` whose step is the closest uniform step to `h`.
    pub fn new(horizon: f64, h: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if !(h > 0.0) || h > horizon * (1.0 + 1e-12) {
            return Err(Error::Domain(format!("step must satisfy 0 < h <= T, got h = {h}, T = {horizon}")));
        }
        let steps = ((horizon / h).round() as usize).max(1);
        Ok(TimeGrid { horizon, steps })
    }

    pub fn with_steps(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(Error::Domain(format!("need T > 0 and steps >= 1, got {horizon}, {steps}")));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Index of the node at time `t`, if `t` falls on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.step()).round();
        if k < 0.0 || k as usize > self.steps {
            return None;
        }
        let k = k as usize;
        ((self.time(k) - t).abs() <= 1e-9 * self.horizon.max(1.0)).then_some(k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Rk4,
    Euler,
}

/// Classical fourth-order step of `x' = F(t, x) + B u` with `u` held constant.
pub fn rk4_step<D: Dynamics + ?Sized>(dynamics: &D, t: f64, x: &Vector3<f64>, h: f64, u: f64) -> Vector3<f64> {
    let b = Vector3::new(u, 0.0, 0.0);
    let k1 = dynamics.drift(t, x) + b;
    let k2 = dynamics.drift(t + 0.5 * h, &(x + 0.5 * h * k1)) + b;
    let k3 = dynamics.drift(t + 0.5 * h, &(x + 0.5 * h * k2)) + b;
    let k4 = dynamics.drift(t + h, &(x + h * k3)) + b;
    x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Trajectory of the deterministic flow on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPath {
    pub grid: TimeGrid,
    pub states: Vec<Vector3<f64>>,
    pub params_id: Option<String>,
}

impl FlowPath {
    pub fn initial(&self) -> State3 {
        self.states[0].into()
    }

    pub fn terminal(&self) -> State3 {
        (*self.states.last().expect("non-empty path")).into()
    }

    pub fn state_at(&self, k: usize) -> State3 {
        self.states[k].into()
    }

    /// Writes `t,x1,x2,x3` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        crate::io::write_state_csv(out, &self.grid.times(), &self.states)
    }
}

pub fn integrate_flow<D: Dynamics + ?Sized>(dynamics: &D, x0: &State3, horizon: f64, h: f64) -> Result<FlowPath> {
    integrate_flow_with(dynamics, x0, TimeGrid::new(horizon, h)?, Scheme::Rk4)
}

pub fn integrate_flow_with<D: Dynamics + ?Sized>(
    dynamics: &D,
    x0: &State3,
    grid: TimeGrid,
    scheme: Scheme,
) -> Result<FlowPath> {
    if !x0.is_finite() {
        return Err(Error::Domain(format!("initial state is not finite: {x0:?}")));
    }
    let h = grid.step();
    let mut states = Vec::with_capacity(grid.len());
    let mut x = x0.vec();
    states.push(x);
    for k in 0..grid.steps {
        let t = grid.time(k);
        x = match scheme {
            Scheme::Rk4 => rk4_step(dynamics, t, &x, h, 0.0),
            Scheme::Euler => x + h * dynamics.drift(t, &x),
        };
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration {
                time: grid.time(k + 1),
                detail: "non-finite flow state".into(),
            });
        }
        states.push(x);
    }
    Ok(FlowPath { grid, states, params_id: None })
}

/// `Phi(T, s_k)` for every grid node `s_k` of a flow path.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionFamily {
    pub grid: TimeGrid,
    pub matrices: Vec<Matrix3<f64>>,
}

impl TransitionFamily {
    /// `Phi(T, s)`, linearly interpolated between grid nodes.
    pub fn at(&self, s: f64) -> Matrix3<f64> {
        interpolate(&self.grid, &self.matrices, s)
    }
}

pub(crate) fn interpolate(grid: &TimeGrid, values: &[Matrix3<f64>], s: f64) -> Matrix3<f64> {
    let h = grid.step();
    let pos = (s / h).clamp(0.0, grid.steps as f64);
    let k = (pos.floor() as usize).min(grid.steps.saturating_sub(1));
    let w = pos - k as f64;
    if w <= 0.0 {
        return values[k];
    }
    values[k] * (1.0 - w) + values[k + 1] * w
}

/// Result of the backward sweep: transition matrices and, when a weight is
/// supplied, the sub-horizon Gramians `W(s_k, T)`.
pub(crate) struct Sweep {
    pub phi: Vec<Matrix3<f64>>,
    pub gramians: Vec<Matrix3<f64>>,
    pub weights: Vec<f64>,
}

pub(crate) type Weight<'a> = &'a dyn Fn(f64, &Vector3<f64>) -> Result<f64>;

/// Integrates `dPhi(T,s)/ds = -Phi(T,s) J(s)` and
/// `dW(s,T)/ds = -a(s) Phi(T,s) B B^T Phi(T,s)^T` backward from `s = T`
/// with the classical fourth-order scheme. Midpoint states come from a
/// half-step of the same scheme started at the left node.
pub(crate) fn backward_sweep<D: Dynamics + ?Sized>(
    dynamics: &D,
    path: &FlowPath,
    weight: Option<Weight<'_>>,
) -> Result<Sweep> {
    let grid = path.grid;
    let n = grid.steps;
    let h = grid.step();
    let eval_weight = |t: f64, x: &Vector3<f64>| -> Result<f64> {
        match weight {
            Some(w) => w(t, x),
            None => Ok(0.0),
        }
    };

    let mut phi: Vec<Matrix3<f64>> = vec![Matrix3::identity(); n + 1];
    let mut gram: Vec<Matrix3<f64>> = vec![Matrix3::zeros(); n + 1];
    let mut weights = vec![0.0; n + 1];
    weights[n] = eval_weight(grid.time(n), &path.states[n])?;

    let outer = |m: &Matrix3<f64>, a: f64| -> Matrix3<f64> {
        let c: Vector3<f64> = m.column(0).into_owned();
        (c * c.transpose()) * (-a)
    };

    for k in (0..n).rev() {
        let (ta, tb) = (grid.time(k), grid.time(k + 1));
        let tm = 0.5 * (ta + tb);
        let xa = path.states[k];
        let xb = path.states[k + 1];
        let xm = rk4_step(dynamics, ta, &xa, 0.5 * h, 0.0);
        let (ja, jm, jb) = (
            dynamics.drift_jacobian(ta, &xa),
            dynamics.drift_jacobian(tm, &xm),
            dynamics.drift_jacobian(tb, &xb),
        );
        let (aa, am) = (eval_weight(ta, &xa)?, eval_weight(tm, &xm)?);
        let ab = weights[k + 1];
        weights[k] = aa;

        let tau = -h;
        let p = phi[k + 1];
        let k1 = -p * jb;
        let p2 = p + 0.5 * tau * k1;
        let k2 = -p2 * jm;
        let p3 = p + 0.5 * tau * k2;
        let k3 = -p3 * jm;
        let p4 = p + tau * k3;
        let k4 = -p4 * ja;
        phi[k] = p + (tau / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

        if weight.is_some() {
            let g = outer(&p, ab) + 2.0 * outer(&p2, am) + 2.0 * outer(&p3, am) + outer(&p4, aa);
            gram[k] = gram[k + 1] + (tau / 6.0) * g;
        }

        if !phi[k].iter().all(|v| v.is_finite()) || !gram[k].iter().all(|v| v.is_finite()) {
            return Err(Error::Integration {
                time: ta,
                detail: "non-finite transition matrix".into(),
            });
        }
    }
    Ok(Sweep { phi, gramians: gram, weights })
}

/// Transition matrices `Phi(T, s)` of the variational equation along `path`.
pub fn transition_matrices<D: Dynamics + ?Sized>(dynamics: &D, path: &FlowPath) -> Result<TransitionFamily> {
    let sweep = backward_sweep(dynamics, path, None)?;
    Ok(TransitionFamily { grid: path.grid, matrices: sweep.phi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearDrift, ModelParams};

    fn x0() -> State3 {
        State3::new(0.6, 0.1, 0.05)
    }

    /// Taylor series with scaling and squaring.
    fn expm(a: &Matrix3<f64>) -> Matrix3<f64> {
        let norm = a.abs().row_sum().max();
        let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
        let scaled = a / 2f64.powi(squarings as i32);
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for k in 1..30 {
            term = term * scaled / k as f64;
            sum += term;
        }
        for _ in 0..squarings {
            sum = sum * sum;
        }
        sum
    }

    #[test]
    fn grid_rounding() {
        let g = TimeGrid::new(1.0, 0.3).unwrap();
        assert_eq!(g.steps, 3);
        assert_eq!(g.time(3), 1.0);
        assert!(TimeGrid::new(1.0, 2.0).is_err());
        assert!(TimeGrid::new(0.0, 0.1).is_err());
        assert_eq!(TimeGrid::new(1.0, 0.001).unwrap().index_of(0.25), Some(250));
    }

    #[test]
    fn zero_field_keeps_state() {
        let path = integrate_flow(&ModelParams::zero(), &x0(), 3.0, 0.01).unwrap();
        assert!(path.states.iter().all(|s| *s == x0().vec()));
        let fam = transition_matrices(&ModelParams::zero(), &path).unwrap();
        assert!(fam.matrices.iter().all(|m| *m == Matrix3::identity()));
    }

    #[test]
    fn initial_node_is_initial_condition() {
        let path = integrate_flow(&ModelParams::reference(), &x0(), 1.0, 0.01).unwrap();
        assert_eq!(path.initial(), x0());
    }

    #[test]
    fn fourth_order_convergence() {
        let p = ModelParams { alpha: 0.8, beta: 2.0, zeta: 1.2, ..ModelParams::reference() };
        let end = |h: f64| integrate_flow(&p, &x0(), 1.0, h).unwrap().terminal().vec();
        let h = 0.1;
        let reference = end(h / 16.0);
        let ratio = (end(h) - reference).norm() / (end(h / 2.0) - reference).norm();
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn blow_up_reports_time() {
        let unstable = LinearDrift::new(Matrix3::from_diagonal_element(800.0));
        let err = integrate_flow(&unstable, &x0(), 100.0, 0.5).unwrap_err();
        assert!(matches!(err, Error::Integration { time, .. } if time > 0.0));
    }

    #[test]
    fn constant_jacobian_matches_matrix_exponential() {
        let a = Matrix3::new(-0.4, 0.3, 0.1, 0.5, -0.2, 0.0, 0.2, 0.7, -0.9);
        let dynamics = LinearDrift::new(a);
        let path = integrate_flow(&dynamics, &x0(), 2.0, 0.01).unwrap();
        let fam = transition_matrices(&dynamics, &path).unwrap();
        assert_eq!(fam.matrices[path.grid.steps], Matrix3::identity());
        for k in [0, 50, 120, 199] {
            let exact = expm(&(a * (2.0 - path.grid.time(k))));
            assert!((fam.matrices[k] - exact).norm() < 1e-9, "k = {k}");
        }
    }

    #[test]
    fn cocycle_property() {
        let p = ModelParams { beta: 1.5, zeta: 0.9, ..ModelParams::reference() };
        let path = integrate_flow(&p, &x0(), 1.0, 0.001).unwrap();
        let full = transition_matrices(&p, &path).unwrap();
        let r = 600;
        let sub = FlowPath {
            grid: TimeGrid::with_steps(path.grid.time(r), r).unwrap(),
            states: path.states[..=r].to_vec(),
            params_id: None,
        };
        let head = transition_matrices(&p, &sub).unwrap();
        for s in [0, 100, 333, 599] {
            let composed = full.matrices[r] * head.matrices[s];
            assert!((composed - full.matrices[s]).norm() < 1e-8, "s = {s}");
        }
    }

    #[test]
    fn flow_is_lipschitz_in_initial_state() {
        let p = ModelParams::reference();
        let path = integrate_flow(&p, &x0(), 1.0, 0.001).unwrap();
        let phi0 = transition_matrices(&p, &path).unwrap().matrices[0];
        let delta = Vector3::new(1e-4, -2e-4, 5e-5);
        let moved = integrate_flow(&p, &State3::from(x0().vec() + delta), 1.0, 0.001).unwrap();
        let gap = (moved.terminal().vec() - path.terminal().vec()).norm();
        assert!(gap <= 2.0 * phi0.norm() * delta.norm());
    }

    #[test]
    fn csv_export_has_header() {
        let path = integrate_flow(&ModelParams::zero(), &x0(), 1.0, 0.5).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x1,x2,x3"));
        assert_eq!(lines.count(), 3);
    }
}
