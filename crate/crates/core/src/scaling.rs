//! Intrinsic time scaling of the degenerate diffusion.
//!
//! Noise injected into `x1` reaches `x2` after one integration and `x3`
//! after two, so over a horizon `t` the three coordinates fluctuate on the
//! scales `t^{1/2}`, `t^{3/2}` and `t^{5/2}`. `Gamma(t) = diag(t, t^2, t^3)`
//! and the rescaler `M(T) = T^{1/2} Gamma(T)^{-1}` turn a horizon-`T`
//! problem into a unit-time one with `p(0,T,x,y) = T^{-9/2} p~(0,1,Mx,My)`.

use std::fmt::Debug;

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::density::DensityEstimate;
use crate::error::{Error, Result};
use crate::flow::{integrate_flow, FlowPath, TimeGrid};
use crate::model::{DiffusionSpec, Dynamics, SigmaHat, State3};
use crate::sde::SdePath;

/// `Gamma(t) = diag(t, t^2, t^3)` for a run of horizon `T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScalingMatrix {
    pub horizon: f64,
    pub t: f64,
    pub diag: [f64; 3],
}

impl ScalingMatrix {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.diag))
    }

    /// `t^{1/2} Gamma(t)^{-1} = diag(t^{-1/2}, t^{-3/2}, t^{-5/2})`.
    pub fn rescaler(&self) -> Vector3<f64> {
        let s = self.t.sqrt();
        Vector3::new(s / self.diag[0], s / self.diag[1], s / self.diag[2])
    }

    /// `det(t^{-1/2} Gamma(t)) = t^{9/2}`.
    pub fn jacobian_det(&self) -> f64 {
        let s = self.t.sqrt();
        self.diag.iter().map(|d| d / s).product()
    }
}

pub fn gamma_matrix(t: f64, horizon: f64) -> Result<ScalingMatrix> {
    if !(t > 0.0) || !(horizon > 0.0) || !t.is_finite() || !horizon.is_finite() {
        return Err(Error::Domain(format!("need t > 0 and T > 0, got t = {t}, T = {horizon}")));
    }
    Ok(ScalingMatrix { horizon, t, diag: [t, t * t, t * t * t] })
}

/// `M(T) = T^{1/2} Gamma(T)^{-1}` as a diagonal.
pub fn rescaler(horizon: f64) -> Result<Vector3<f64>> {
    Ok(gamma_matrix(horizon, horizon)?.rescaler())
}

fn check_horizon(grid: &TimeGrid, horizon: f64) -> Result<()> {
    if (grid.horizon - horizon).abs() > 1e-12 * horizon.max(1.0) {
        return Err(Error::Config(format!(
            "path is defined on [0, {}], not on [0, {horizon}]",
            grid.horizon
        )));
    }
    Ok(())
}

fn scale_states(states: &[Vector3<f64>], m: &Vector3<f64>) -> Vec<Vector3<f64>> {
    states.iter().map(|x| x.component_mul(m)).collect()
}

/// Paths that can be mapped to the unit-time picture and back.
pub trait Rescalable: Sized {
    fn grid(&self) -> TimeGrid;
    fn with_states(&self, grid: TimeGrid, states: Vec<Vector3<f64>>) -> Self;
    fn states(&self) -> &[Vector3<f64>];
}

impl Rescalable for SdePath {
    fn grid(&self) -> TimeGrid {
        self.grid
    }
    fn with_states(&self, grid: TimeGrid, states: Vec<Vector3<f64>>) -> Self {
        SdePath { grid, states, ..self.clone() }
    }
    fn states(&self) -> &[Vector3<f64>] {
        &self.states
    }
}

impl Rescalable for FlowPath {
    fn grid(&self) -> TimeGrid {
        self.grid
    }
    fn with_states(&self, grid: TimeGrid, states: Vec<Vector3<f64>>) -> Self {
        FlowPath { grid, states, params_id: self.params_id.clone() }
    }
    fn states(&self) -> &[Vector3<f64>] {
        &self.states
    }
}

/// `X~(t) = M(T) X(T t)` on the unit-time grid with the same node count.
pub fn rescale_path<P: Rescalable>(path: &P, horizon: f64) -> Result<P> {
    let grid = path.grid();
    check_horizon(&grid, horizon)?;
    let m = rescaler(horizon)?;
    let unit = TimeGrid::with_steps(1.0, grid.steps)?;
    Ok(path.with_states(unit, scale_states(path.states(), &m)))
}

/// Inverse of [`rescale_path`]: a unit-time path back on `[0, T]`.
pub fn unrescale_path<P: Rescalable>(path: &P, horizon: f64) -> Result<P> {
    let grid = path.grid();
    check_horizon(&grid, 1.0)?;
    let m_inv = rescaler(horizon)?.map(|v| 1.0 / v);
    let full = TimeGrid::with_steps(horizon, grid.steps)?;
    Ok(path.with_states(full, scale_states(path.states(), &m_inv)))
}

/// Rescaled flow `Theta~(t, x~) = M Theta(T t, M^{-1} x~)` sampled on the
/// unit grid.
pub fn rescaled_flow<D: Dynamics + ?Sized>(dynamics: &D, x_tilde: &State3, horizon: f64, h: f64) -> Result<FlowPath> {
    let m = rescaler(horizon)?;
    let x0 = State3::from(x_tilde.vec().component_div(&m));
    let flow = integrate_flow(dynamics, &x0, horizon, h)?;
    rescale_path(&flow, horizon)
}

/// Drift of the rescaled process on unit time:
/// `F~(t, x~) = T M F(T t, M^{-1} x~)`.
#[derive(Clone, Debug)]
pub struct RescaledDynamics<D> {
    pub inner: D,
    pub horizon: f64,
    m: Vector3<f64>,
}

impl<D: Dynamics> RescaledDynamics<D> {
    pub fn new(inner: D, horizon: f64) -> Result<Self> {
        Ok(RescaledDynamics { inner, horizon, m: rescaler(horizon)? })
    }
}

impl<D: Dynamics> Dynamics for RescaledDynamics<D> {
    fn drift(&self, t: f64, x: &Vector3<f64>) -> Vector3<f64> {
        let orig = x.component_div(&self.m);
        self.horizon * self.inner.drift(self.horizon * t, &orig).component_mul(&self.m)
    }

    fn drift_jacobian(&self, t: f64, x: &Vector3<f64>) -> Matrix3<f64> {
        let orig = x.component_div(&self.m);
        let j = self.inner.drift_jacobian(self.horizon * t, &orig);
        Matrix3::from_fn(|r, c| self.horizon * self.m[r] * j[(r, c)] / self.m[c])
    }
}

/// Noise of the rescaled process: `x~1` gains `T^{-1/2} sigma_hat dW(T t)`,
/// which in law is `sigma_hat(T t, M^{-1} x~) dW~(t)` for a standard `W~`.
pub fn rescaled_diffusion(diff: &DiffusionSpec, horizon: f64) -> Result<DiffusionSpec> {
    let m = rescaler(horizon)?;
    match &diff.sigma_hat {
        SigmaHat::Constant(_) => Ok(diff.clone()),
        SigmaHat::Callback(f) => {
            let f = f.clone();
            let mapped = move |t: f64, x: &Vector3<f64>| f(horizon * t, &x.component_div(&m));
            DiffusionSpec::callback(mapped, diff.lambda_lower, diff.sigma_upper)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub y: [f64; 3],
    pub p: f64,
    pub p_se: f64,
    /// `T^{-9/2} p~(M y)` (or `T^{-1/2}` on the `x1` marginal).
    pub p_rescaled: f64,
    pub p_rescaled_se: f64,
    pub z: f64,
    pub included: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub horizon: f64,
    pub points: Vec<ScalingPoint>,
    pub max_relative_deviation: f64,
    pub max_z: f64,
    pub excluded: usize,
    pub passed: bool,
}

/// Compares `p(0,T,x,y)` with `T^{-9/2} p~(0,1,Mx,My)` point by point.
///
/// `p_tilde` must have been evaluated at the rescaled probes `M y`.
/// Points whose effective sample size falls below `min_ess` on either side
/// are excluded. `z_tol` is the pass band in combined standard errors.
pub fn density_scaling_check(
    p_at_t: &DensityEstimate,
    p_tilde_at_1: &DensityEstimate,
    horizon: f64,
    min_ess: f64,
    z_tol: f64,
) -> Result<ScalingReport> {
    if p_at_t.probes.len() != p_tilde_at_1.probes.len() || p_at_t.marginal != p_tilde_at_1.marginal {
        return Err(Error::Config("density estimates are not evaluated on matching probe sets".into()));
    }
    let scale = gamma_matrix(horizon, horizon)?;
    let m = scale.rescaler();
    let dims = p_at_t.marginal.dims();
    let det = if dims == 1 { m[0] } else { m.iter().product() };
    let mut points = Vec::with_capacity(p_at_t.probes.len());
    for i in 0..p_at_t.probes.len() {
        let y = p_at_t.probes[i];
        let mapped = y.component_mul(&m);
        let yt = p_tilde_at_1.probes[i];
        let matched = (0..dims).all(|c| (mapped[c] - yt[c]).abs() <= 1e-9 * mapped[c].abs().max(1e-300));
        if !matched {
            return Err(Error::Config(format!("probe {i} of the unit-time estimate is not M(T) y")));
        }
        let p_r = det * p_tilde_at_1.values[i];
        let se_r = det * p_tilde_at_1.std_errors[i];
        let combined = (p_at_t.std_errors[i].powi(2) + se_r.powi(2)).sqrt();
        let diff = p_at_t.values[i] - p_r;
        let z = if combined > 0.0 { diff.abs() / combined } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
        let included = p_at_t.ess[i] >= min_ess && p_tilde_at_1.ess[i] >= min_ess;
        points.push(ScalingPoint {
            y: [y[0], y[1], y[2]],
            p: p_at_t.values[i],
            p_se: p_at_t.std_errors[i],
            p_rescaled: p_r,
            p_rescaled_se: se_r,
            z,
            included,
        });
    }
    let used: Vec<&ScalingPoint> = points.iter().filter(|p| p.included).collect();
    if used.is_empty() {
        return Err(Error::Insufficient("no probe has enough effective samples".into()));
    }
    let max_relative_deviation = used
        .iter()
        .map(|p| (p.p - p.p_rescaled).abs() / p.p.abs().max(p.p_rescaled.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    let max_z = used.iter().map(|p| p.z).fold(0.0, f64::max);
    Ok(ScalingReport {
        horizon,
        excluded: points.len() - used.len(),
        passed: max_z <= z_tol,
        points,
        max_relative_deviation,
        max_z,
    })
}
