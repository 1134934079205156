//! Minimum-energy steering: the action functional by single shooting, the
//! controllability Gramian of the linearization along the flow, and the
//! closed-form feedback of the linear problem.

use std::fmt::Debug;
use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{backward_sweep, integrate_flow, interpolate, rk4_step, FlowPath, TimeGrid, TransitionFamily};
use crate::linalg::{psd_eigen, Eigen3};
use crate::model::{DiffusionSpec, Dynamics, State3};
use crate::sde::{draw_v, em_step, ControlSignal, SdeConfig};
use crate::streams::NoiseStreams;

/// Relative eigenvalue threshold below which a Gramian counts as singular.
pub const SINGULAR_RTOL: f64 = 1e-14;

/// `W(s, T) = int_s^T Phi(T,r) B a(r) B^T Phi(T,r)^T dr` along the flow.
#[derive(Clone, Debug)]
pub struct Gramian {
    pub horizon: f64,
    /// `W(0, T)`.
    pub matrix: Matrix3<f64>,
    pub transition: TransitionFamily,
    /// `a(t, phi(t)) = sigma_hat^2` at the grid nodes.
    pub sigma_profile: Vec<f64>,
    /// `W(t_k, T)` at every node.
    pub sub_gramians: Vec<Matrix3<f64>>,
    pub flow: FlowPath,
    pub eigen: Eigen3,
}

#[derive(Clone, Debug, Serialize)]
pub struct GramianDump {
    pub horizon: f64,
    pub matrix: [[f64; 3]; 3],
    pub eigenvalues: [f64; 3],
    pub min_eigenvalue: f64,
    pub flow_end: [f64; 3],
}

impl Gramian {
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen.values[0]
    }

    pub fn flow_end(&self) -> Vector3<f64> {
        *self.flow.states.last().expect("non-empty flow")
    }

    pub fn is_positive_definite(&self) -> bool {
        self.eigen.values[0] > SINGULAR_RTOL * self.eigen.values[2].abs()
    }

    pub fn dump(&self) -> GramianDump {
        let m = &self.matrix;
        GramianDump {
            horizon: self.horizon,
            matrix: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            eigenvalues: self.eigen.values.into(),
            min_eigenvalue: self.min_eigenvalue(),
            flow_end: self.flow_end().into(),
        }
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        crate::io::write_json(out, &self.dump())
    }
}

/// Flow, transition matrices and Gramian of the linearization around the
/// flow from `x0`, all on one grid of step `h`.
pub fn linearize_and_gramian<D: Dynamics + ?Sized>(
    dynamics: &D,
    diff: &DiffusionSpec,
    x0: &State3,
    horizon: f64,
    h: f64,
) -> Result<Gramian> {
    let flow = integrate_flow(dynamics, x0, horizon, h)?;
    let weight = |t: f64, x: &Vector3<f64>| diff.a(t, x);
    let sweep = backward_sweep(dynamics, &flow, Some(&weight))?;
    let matrix = symmetrize(&sweep.gramians[0]);
    Ok(Gramian {
        horizon,
        eigen: psd_eigen(&matrix),
        matrix,
        transition: TransitionFamily { grid: flow.grid, matrices: sweep.phi },
        sigma_profile: sweep.weights,
        sub_gramians: sweep.gramians.iter().map(symmetrize).collect(),
        flow,
    })
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    0.5 * (m + m.transpose())
}

/// `d^T W^{-1} d` with `W` checked for positive definiteness.
fn inverse_quadratic(w: &Matrix3<f64>, d: &Vector3<f64>) -> Result<(f64, Vector3<f64>)> {
    let eig = psd_eigen(w);
    if !(eig.values[0] > SINGULAR_RTOL * eig.values[2].abs()) {
        let v = eig.vectors.column(0);
        return Err(Error::Uncontrollable { direction: [v[0], v[1], v[2]], eigenvalue: eig.values[0] });
    }
    let chol = w.cholesky().ok_or_else(|| {
        let v = eig.vectors.column(0);
        Error::Uncontrollable { direction: [v[0], v[1], v[2]], eigenvalue: eig.values[0] }
    })?;
    let sol = chol.solve(d);
    Ok((d.dot(&sol), sol))
}

/// Minimum energy `1/2 d^T W(T)^{-1} d` of the linearized system,
/// `d = flow_end - y0`.
pub fn action_linear(g: &Gramian, flow_end: &State3, y0: &State3) -> Result<f64> {
    let d = flow_end.vec() - y0.vec();
    if d.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    Ok(0.5 * inverse_quadratic(&g.matrix, &d)?.0)
}

/// Open-loop minimum-energy control of the linear problem at the grid
/// nodes: `u(s) = a(s) B^T Phi(T,s)^T W(0,T)^{-1} (y0 - phi(T))`.
pub fn minimum_energy_control(g: &Gramian, y0: &State3) -> Result<Vec<f64>> {
    let d = y0.vec() - g.flow_end();
    let (_, lambda) = inverse_quadratic(&g.matrix, &d)?;
    Ok(g.transition
        .matrices
        .iter()
        .zip(&g.sigma_profile)
        .map(|(phi, a)| a * phi.column(0).dot(&lambda))
        .collect())
}

/// Closed-form feedback of the linear problem,
/// `u(t, x) = a(t) B^T Phi(T,t)^T W(t,T)^{-1} ((y0 - phi(T)) - Phi(T,t)(x - phi(t)))`.
///
/// Undefined within `floor` of the horizon, where `W(t,T)` degenerates.
pub fn optimal_feedback_linear(g: &Gramian, t: f64, x: &State3, y0: &State3, floor: f64) -> Result<f64> {
    if !(t >= 0.0) || t > g.horizon {
        return Err(Error::Domain(format!("feedback time {t} outside [0, {}]", g.horizon)));
    }
    if g.horizon - t < floor {
        return Err(Error::HorizonFloor { time: t, floor });
    }
    let grid = g.flow.grid;
    let phi = interpolate(&grid, &g.transition.matrices, t);
    let w = interpolate(&grid, &g.sub_gramians, t);
    let on_flow = interpolate_vec(&grid, &g.flow.states, t);
    let a = interpolate_scalar(&grid, &g.sigma_profile, t);
    let miss = (y0.vec() - g.flow_end()) - phi * (x.vec() - on_flow);
    let (_, lambda) = inverse_quadratic(&w, &miss).map_err(|_| Error::HorizonFloor { time: t, floor })?;
    Ok(a * phi.column(0).dot(&lambda))
}

/// Noiseless or noisy run of `cfg` under the linear feedback law, holding
/// the last control value once within `floor` of the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopRun {
    pub states: Vec<Vector3<f64>>,
    pub controls: Vec<f64>,
    /// `1/2 int u^2 / a dt` along the run.
    pub cost: f64,
}

pub fn closed_loop_linear<D: Dynamics + Debug>(
    cfg: &SdeConfig<D>,
    g: &Gramian,
    y0: &State3,
    floor: f64,
    seed: u64,
) -> Result<ClosedLoopRun> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let h = grid.step();
    let mut streams = NoiseStreams::new(seed);
    let mut x = cfg.x0.vec();
    let mut states = vec![x];
    let mut controls = Vec::with_capacity(grid.steps);
    let mut held = 0.0;
    let mut cost = 0.0;
    for k in 0..grid.steps {
        let t = grid.time(k);
        if g.horizon - t >= floor {
            held = optimal_feedback_linear(g, t, &State3::from(x), y0, floor)?;
        }
        let a = interpolate_scalar(&g.flow.grid, &g.sigma_profile, t.min(g.horizon));
        cost += 0.5 * held * held / a * h;
        let z_w = streams.w();
        let z_v = draw_v(cfg.eps_reg, cfg.reg_noise, &mut streams);
        x = em_step(cfg, t, &x, h, held, z_w, z_v)?;
        controls.push(held);
        states.push(x);
    }
    Ok(ClosedLoopRun { states, controls, cost })
}

fn locate(grid: &TimeGrid, s: f64) -> (usize, f64) {
    let pos = (s / grid.step()).clamp(0.0, grid.steps as f64);
    let k = (pos.floor() as usize).min(grid.steps.saturating_sub(1));
    (k, pos - k as f64)
}

fn interpolate_vec(grid: &TimeGrid, v: &[Vector3<f64>], s: f64) -> Vector3<f64> {
    let (k, w) = locate(grid, s);
    v[k] * (1.0 - w) + v[k + 1] * w
}

fn interpolate_scalar(grid: &TimeGrid, v: &[f64], s: f64) -> f64 {
    let (k, w) = locate(grid, s);
    v[k] * (1.0 - w) + v[k + 1] * w
}

/// Knobs of the penalty-continuation shooting solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ActionSolver {
    /// RK4 steps per control interval.
    pub substeps: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub stages: usize,
    pub max_iters: u64,
    pub grad_tol: f64,
    /// Endpoint gap accepted as converged.
    pub gap_tol: f64,
    /// Double the number of intervals once when the gap stays too large.
    pub refine: bool,
}

impl Default for ActionSolver {
    fn default() -> Self {
        ActionSolver {
            substeps: 16,
            initial_penalty: 1e3,
            penalty_growth: 10.0,
            stages: 6,
            max_iters: 200,
            grad_tol: 1e-9,
            gap_tol: 1e-4,
            refine: true,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ActionResult {
    /// `I = 1/2 int phi(t)^2 dt` of the returned control.
    pub value: f64,
    pub control: ControlSignal,
    pub endpoint: State3,
    pub endpoint_gap: f64,
    pub iterations: u64,
    pub converged: bool,
    pub final_penalty: f64,
}

impl ActionResult {
    /// Control values and controlled states at the interval boundaries.
    pub fn write_trace_csv<W: Write, D: Dynamics + ?Sized>(
        &self,
        out: W,
        dynamics: &D,
        x0: &State3,
        substeps: usize,
    ) -> Result<()> {
        let states = shoot(dynamics, x0, &self.control, substeps);
        let dt = self.control.interval_length();
        let n = self.control.intervals();
        crate::io::write_rows(
            out,
            &["t", "phi", "x1", "x2", "x3"],
            (0..=n).map(|k| {
                let u = self.control.values[k.min(n - 1)];
                let x = states[k * substeps];
                vec![k as f64 * dt, u, x[0], x[1], x[2]]
            }),
        )
    }
}

/// States of `x' = F(t, x) + B u(t)` under piecewise-constant `u`, RK4 with
/// `substeps` steps per interval (all sub-nodes returned).
pub fn shoot<D: Dynamics + ?Sized>(dynamics: &D, x0: &State3, control: &ControlSignal, substeps: usize) -> Vec<Vector3<f64>> {
    let n = control.intervals();
    let h = control.interval_length() / substeps as f64;
    let mut states = Vec::with_capacity(n * substeps + 1);
    let mut x = x0.vec();
    states.push(x);
    for (j, u) in control.values.iter().enumerate() {
        for s in 0..substeps {
            let t = (j * substeps + s) as f64 * h;
            x = rk4_step(dynamics, t, &x, h, *u);
            states.push(x);
        }
    }
    states
}

fn forward<D: Dynamics + ?Sized>(dynamics: &D, x0: &State3, u: &[f64], h: f64, substeps: usize) -> Vec<Vector3<f64>> {
    let mut states = Vec::with_capacity(u.len() * substeps + 1);
    let mut x = x0.vec();
    states.push(x);
    for (j, uj) in u.iter().enumerate() {
        for s in 0..substeps {
            let t = (j * substeps + s) as f64 * h;
            x = rk4_step(dynamics, t, &x, h, *uj);
            states.push(x);
        }
    }
    states
}

/// Derivative of `lambda_end . x(T)` with respect to each `u_j`, by the
/// discrete adjoint of the RK4 recursion.
fn adjoint<D: Dynamics + ?Sized>(
    dynamics: &D,
    states: &[Vector3<f64>],
    u: &[f64],
    h: f64,
    substeps: usize,
    lambda_end: Vector3<f64>,
) -> Vec<f64> {
    let b = Vector3::x();
    let mut grad = vec![0.0; u.len()];
    let mut lambda = lambda_end;
    for j in (0..u.len()).rev() {
        let uj = u[j];
        for s in (0..substeps).rev() {
            let idx = j * substeps + s;
            let t = idx as f64 * h;
            let xn = states[idx];
            let f = |tt: f64, xx: &Vector3<f64>| dynamics.drift(tt, xx) + b * uj;
            let k1 = f(t, &xn);
            let p2 = xn + 0.5 * h * k1;
            let k2 = f(t + 0.5 * h, &p2);
            let p3 = xn + 0.5 * h * k2;
            let k3 = f(t + 0.5 * h, &p3);
            let p4 = xn + h * k3;
            let a4 = (h / 6.0) * lambda;
            let b4 = dynamics.drift_jacobian(t + h, &p4).transpose() * a4;
            let a3 = (h / 3.0) * lambda + h * b4;
            let b3 = dynamics.drift_jacobian(t + 0.5 * h, &p3).transpose() * a3;
            let a2 = (h / 3.0) * lambda + 0.5 * h * b3;
            let b2 = dynamics.drift_jacobian(t + 0.5 * h, &p2).transpose() * a2;
            let a1 = (h / 6.0) * lambda + 0.5 * h * b2;
            let b1 = dynamics.drift_jacobian(t, &xn).transpose() * a1;
            grad[j] += a1[0] + a2[0] + a3[0] + a4[0];
            lambda += b1 + b2 + b3 + b4;
        }
    }
    grad
}

/// Penalized objective `1/2 sum u_k^2 dt + w |x(T) - y0|^2` and its exact
/// gradient from the discrete adjoint of the RK4 recursion.
pub fn action_objective<D: Dynamics + ?Sized>(
    dynamics: &D,
    x0: &State3,
    y0: &State3,
    horizon: f64,
    substeps: usize,
    penalty: f64,
    u: &[f64],
) -> (f64, Vec<f64>) {
    let dt = horizon / u.len() as f64;
    let h = dt / substeps as f64;
    let states = forward(dynamics, x0, u, h, substeps);
    let gap = states[states.len() - 1] - y0.vec();
    let value = 0.5 * u.iter().map(|v| v * v).sum::<f64>() * dt + penalty * gap.norm_squared();
    let mut grad = adjoint(dynamics, &states, u, h, substeps, 2.0 * penalty * gap);
    for (g, v) in grad.iter_mut().zip(u) {
        *g += v * dt;
    }
    (value, grad)
}

/// Endpoint and its sensitivity `d x(T) / d u` (one row per component).
fn endpoint_jacobian<D: Dynamics + ?Sized>(
    dynamics: &D,
    x0: &State3,
    u: &[f64],
    h: f64,
    substeps: usize,
) -> (Vector3<f64>, [Vec<f64>; 3]) {
    let states = forward(dynamics, x0, u, h, substeps);
    let end = states[states.len() - 1];
    let rows = [0, 1, 2].map(|i| adjoint(dynamics, &states, u, h, substeps, Vector3::ith(i, 1.0)));
    (end, rows)
}

fn run_stages<D: Dynamics + ?Sized>(
    dynamics: &D,
    x0: &State3,
    y0: &State3,
    horizon: f64,
    n: usize,
    solver: &ActionSolver,
) -> Result<ActionResult> {
    // Damped Gauss-Newton in v = u sqrt(dt), where the objective reads
    // |v|^2 / 2 + w |r(v)|^2 with the three-component residual r = x(T) - y0.
    // The N x N normal matrix (1 + mu) I + 2w J^T J is inverted through the
    // 3 x 3 Woodbury system.
    let dt = horizon / n as f64;
    let h = dt / solver.substeps as f64;
    let scale = dt.sqrt();
    let target = y0.vec();
    let cost = |v: &[f64], penalty: f64| -> Result<f64> {
        let u: Vec<f64> = v.iter().map(|x| x / scale).collect();
        let end = forward(dynamics, x0, &u, h, solver.substeps)[n * solver.substeps];
        let f = 0.5 * v.iter().map(|x| x * x).sum::<f64>() + penalty * (end - target).norm_squared();
        if f.is_finite() {
            Ok(f)
        } else {
            Err(Error::Integration { time: horizon, detail: "action solver: non-finite objective".into() })
        }
    };
    let mut v = vec![0.0; n];
    let mut penalty = solver.initial_penalty;
    let mut iterations = 0;
    for stage in 0..solver.stages {
        if stage > 0 {
            penalty *= solver.penalty_growth;
        }
        let mut mu = 1e-3;
        let mut f = cost(&v, penalty)?;
        for _ in 0..solver.max_iters {
            let u: Vec<f64> = v.iter().map(|x| x / scale).collect();
            let (end, rows) = endpoint_jacobian(dynamics, x0, &u, h, solver.substeps);
            let r = end - target;
            let jac = |i: usize, k: usize| rows[i][k] / scale;
            let c = 2.0 * penalty;
            let grad: Vec<f64> = (0..n).map(|k| v[k] + c * (0..3).map(|i| jac(i, k) * r[i]).sum::<f64>()).collect();
            if grad.iter().all(|g| g.abs() <= solver.grad_tol) {
                break;
            }
            let jjt = Matrix3::from_fn(|i, l| (0..n).map(|k| jac(i, k) * jac(l, k)).sum::<f64>());
            let jg = Vector3::from_fn(|i, _| (0..n).map(|k| jac(i, k) * grad[k]).sum::<f64>());
            let mut accepted = false;
            while mu < 1e12 {
                let a = 1.0 + mu;
                let Some(z) = (Matrix3::identity() * a + jjt * c).lu().solve(&jg) else {
                    mu *= 10.0;
                    continue;
                };
                let trial: Vec<f64> = (0..n)
                    .map(|k| v[k] - (grad[k] - c * (0..3).map(|i| jac(i, k) * z[i]).sum::<f64>()) / a)
                    .collect();
                let ft = cost(&trial, penalty).unwrap_or(f64::INFINITY);
                if ft <= f {
                    let stalled = f - ft <= 1e-15 * f.abs();
                    v = trial;
                    f = ft;
                    mu = (mu * 0.3).max(1e-12);
                    accepted = !stalled;
                    break;
                }
                mu *= 10.0;
            }
            iterations += 1;
            if !accepted {
                break;
            }
        }
    }
    let control = ControlSignal::new(horizon, v.iter().map(|x| x / scale).collect())?;
    let end = *shoot(dynamics, x0, &control, solver.substeps).last().expect("non-empty");
    let endpoint_gap = (end - target).norm();
    Ok(ActionResult {
        value: 0.5 * control.squared_integral(),
        endpoint: State3::from(end),
        endpoint_gap,
        iterations,
        converged: endpoint_gap <= solver.gap_tol,
        final_penalty: penalty,
        control,
    })
}

/// Minimizes `1/2 int phi^2 dt` over piecewise-constant `phi` on `n`
/// intervals subject to `x' = F(t, x) + B phi`, `x(0) = x0`, `x(T) = y0`,
/// with the endpoint enforced by a growing quadratic penalty.
pub fn minimize_action<D: Dynamics + ?Sized>(
    dynamics: &D,
    x0: &State3,
    y0: &State3,
    horizon: f64,
    n: usize,
    solver: &ActionSolver,
) -> Result<ActionResult> {
    if n < 4 {
        return Err(Error::Config(format!("need at least 4 control intervals, got {n}")));
    }
    if !(horizon > 0.0) {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    if !x0.is_finite() || !y0.is_finite() {
        return Err(Error::Domain("non-finite endpoint".into()));
    }
    let first = run_stages(dynamics, x0, y0, horizon, n, solver)?;
    if first.converged || !solver.refine {
        return Ok(first);
    }
    let second = run_stages(dynamics, x0, y0, horizon, 2 * n, solver)?;
    Ok(if second.endpoint_gap < first.endpoint_gap { second } else { first })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearDrift, ModelParams};

    fn unit() -> DiffusionSpec {
        DiffusionSpec::constant(1.0).unwrap()
    }

    #[test]
    fn no_coupling_gives_singular_gramian() {
        let g = linearize_and_gramian(&ModelParams::zero(), &unit(), &State3::new(0.5, 0.1, 0.1), 2.0, 0.01).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(2.0, 0.0, 0.0));
        assert!((g.matrix - expected).norm() < 1e-12);
        assert!(!g.is_positive_definite());
        let err = action_linear(&g, &State3::new(0.5, 0.1, 0.1), &State3::new(0.5, 0.2, 0.1)).unwrap_err();
        match err {
            Error::Uncontrollable { direction, .. } => assert!(direction[0].abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn epidemic_gramian_is_positive_definite() {
        let g = linearize_and_gramian(&ModelParams::reference(), &unit(), &State3::new(0.6, 0.1, 0.05), 1.0, 1e-3)
            .unwrap();
        assert!((g.matrix - g.matrix.transpose()).amax() < 1e-12);
        assert!(g.min_eigenvalue() > 0.0 && g.is_positive_definite());
    }

    #[test]
    fn action_linear_symmetry_and_zero() {
        let g = linearize_and_gramian(&LinearDrift::chain_of_integrators(), &unit(), &State3::new(0.0, 0.0, 0.0), 1.0, 1e-3)
            .unwrap();
        let end = State3::from(g.flow_end());
        assert_eq!(action_linear(&g, &end, &end).unwrap(), 0.0);
        let y = State3::new(0.3, -0.2, 0.5);
        let mirror = State3::from(2.0 * end.vec() - y.vec());
        let a = action_linear(&g, &end, &y).unwrap();
        let b = action_linear(&g, &end, &mirror).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let p = ModelParams::reference();
        let x0 = State3::new(0.6, 0.1, 0.05);
        let y0 = State3::new(0.55, 0.12, 0.06);
        let u: Vec<f64> = (0..8).map(|k| 0.1 * (k as f64 - 3.5)).collect();
        let (_, g) = action_objective(&p, &x0, &y0, 1.0, 4, 50.0, &u);
        for k in 0..u.len() {
            let e = 1e-6;
            let mut up = u.clone();
            let mut dn = u.clone();
            up[k] += e;
            dn[k] -= e;
            let fd = (action_objective(&p, &x0, &y0, 1.0, 4, 50.0, &up).0
                - action_objective(&p, &x0, &y0, 1.0, 4, 50.0, &dn).0)
                / (2.0 * e);
            assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1e-3), "k={k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn free_flow_target_costs_nothing() {
        let p = ModelParams::reference();
        let x0 = State3::new(0.6, 0.1, 0.05);
        let solver = ActionSolver::default();
        let dt = 1.0 / 16.0;
        let end = integrate_flow(&p, &x0, 1.0, dt / solver.substeps as f64).unwrap().terminal();
        let r = minimize_action(&p, &x0, &end, 1.0, 16, &solver).unwrap();
        assert!(r.value < 1e-8 && r.converged);
        assert!(minimize_action(&p, &x0, &end, 1.0, 3, &solver).is_err());
    }

    #[test]
    fn feedback_vanishes_on_free_trajectory() {
        let p = ModelParams::reference();
        let x0 = State3::new(0.6, 0.1, 0.05);
        let g = linearize_and_gramian(&p, &unit(), &x0, 1.0, 1e-2).unwrap();
        let end = State3::from(g.flow_end());
        for k in [0usize, 30, 70] {
            let t = g.flow.grid.time(k);
            let u = optimal_feedback_linear(&g, t, &State3::from(g.flow.states[k]), &end, 0.05).unwrap();
            assert!(u.abs() < 1e-12);
        }
        assert!(matches!(
            optimal_feedback_linear(&g, 0.99, &x0, &end, 0.05),
            Err(Error::HorizonFloor { .. })
        ));
    }
}
