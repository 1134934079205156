//! First exit from a box, exit probabilities by horizon, mollified boundary
//! functionals and the coupled study of the regularized process as its
//! extra noise is switched off.

use std::fmt::Debug;
use std::io::Write;
use std::ops::ControlFlow;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dynamics, State3};
use crate::sde::{drive, Control, SdeConfig, SdePath};
use crate::stats::{mean_var, normal_quantile, wilson_interval};
use crate::streams::trajectory_seed;

/// Largest tolerated fraction of failed trajectories in an exit study.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

/// Axis-aligned open box `lower < x < upper`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBox {
    pub lower: State3,
    pub upper: State3,
}

/// A face of the box: coordinate `axis`, on the upper or lower side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Face {
    pub axis: usize,
    pub upper: bool,
}

impl Face {
    pub fn outward_normal(&self) -> Vector3<f64> {
        Vector3::ith(self.axis, if self.upper { 1.0 } else { -1.0 })
    }
}

impl DomainBox {
    pub fn new(lower: State3, upper: State3) -> Result<Self> {
        let (l, u) = (lower.vec(), upper.vec());
        if !(0..3).all(|i| l[i].is_finite() && u[i].is_finite() && l[i] < u[i]) {
            return Err(Error::Config(format!("box corners must satisfy lower < upper, got {lower:?} and {upper:?}")));
        }
        Ok(DomainBox { lower, upper })
    }

    /// Slab `|x1 - center.x1| < half_width`, with far faces at distance
    /// `far` in `x2` and `x3`.
    pub fn slab_x1(center: &State3, half_width: f64, far: f64) -> Result<Self> {
        let c = center.vec();
        let w = Vector3::new(half_width, far, far);
        DomainBox::new(State3::from(c - w), State3::from(c + w))
    }

    pub fn validate(&self) -> Result<()> {
        DomainBox::new(self.lower, self.upper).map(|_| ())
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        let (l, u) = (self.lower.vec(), self.upper.vec());
        (0..3).all(|i| l[i] < x[i] && x[i] < u[i])
    }

    pub fn contains_box(&self, other: &DomainBox) -> bool {
        let (l, u) = (self.lower.vec(), self.upper.vec());
        let (ol, ou) = (other.lower.vec(), other.upper.vec());
        (0..3).all(|i| l[i] <= ol[i] && ou[i] <= u[i])
    }

    /// Distance to the nearest face, positive inside and `<= 0` outside
    /// (the negated distance to the closest violated face).
    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.nearest_face(x).1
    }

    /// Face with the smallest signed margin and that margin.
    pub fn nearest_face(&self, x: &Vector3<f64>) -> (Face, f64) {
        let (l, u) = (self.lower.vec(), self.upper.vec());
        let mut best = (Face { axis: 0, upper: false }, f64::INFINITY);
        for axis in 0..3 {
            for (upper, margin) in [(false, x[axis] - l[axis]), (true, u[axis] - x[axis])] {
                if margin < best.1 {
                    best = (Face { axis, upper }, margin);
                }
            }
        }
        best
    }

    fn face_value(&self, face: Face) -> f64 {
        if face.upper {
            self.upper.vec()[face.axis]
        } else {
            self.lower.vec()[face.axis]
        }
    }

    /// First crossing on the segment `a -> b` with `a` inside and `b` not:
    /// fraction along the segment, crossing point (snapped onto the face),
    /// and the face hit.
    pub fn crossing(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> (f64, Vector3<f64>, Face) {
        let (l, u) = (self.lower.vec(), self.upper.vec());
        let mut best = (1.0, Face { axis: 0, upper: true });
        for axis in 0..3 {
            let d = b[axis] - a[axis];
            if b[axis] >= u[axis] && d > 0.0 {
                let s = (u[axis] - a[axis]) / d;
                if s < best.0 {
                    best = (s, Face { axis, upper: true });
                }
            }
            if b[axis] <= l[axis] && d < 0.0 {
                let s = (l[axis] - a[axis]) / d;
                if s < best.0 {
                    best = (s, Face { axis, upper: false });
                }
            }
        }
        let (s, face) = best;
        let s = s.clamp(0.0, 1.0);
        let mut point = a + s * (b - a);
        point[face.axis] = self.face_value(face);
        (s, point, face)
    }

    /// Whether the drift points out of the box through `face` at `x`
    /// (the outflow part of the boundary).
    pub fn is_outflow<D: Dynamics + ?Sized>(&self, dynamics: &D, t: f64, x: &Vector3<f64>, face: Face) -> bool {
        dynamics.drift(t, x).dot(&face.outward_normal()) > 0.0
    }
}

/// First exit of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExitEvent {
    pub time: f64,
    pub state: State3,
    pub face: Face,
}

fn check_start(d: &DomainBox, x0: &Vector3<f64>) -> Result<()> {
    if d.contains(x0) {
        Ok(())
    } else {
        Err(Error::Domain(format!("start {:?} is not strictly inside the domain", State3::from(*x0))))
    }
}

/// First node outside `d`, with the crossing time and state linearly
/// interpolated from the last inside node. `None` when the path stays
/// inside through the horizon.
pub fn exit_time(path: &SdePath, d: &DomainBox) -> Result<Option<ExitEvent>> {
    let first = path.states.first().ok_or_else(|| Error::Insufficient("empty path".into()))?;
    check_start(d, first)?;
    let h = path.grid.step();
    for k in 1..path.states.len() {
        let x = &path.states[k];
        if !d.contains(x) {
            let prev = &path.states[k - 1];
            let (s, point, face) = d.crossing(prev, x);
            return Ok(Some(ExitEvent { time: path.grid.time(k - 1) + s * h, state: State3::from(point), face }));
        }
    }
    Ok(None)
}

/// Per-trajectory exit record when the boundary is checked every
/// `strides[j]` grid steps.
#[derive(Clone, Debug)]
struct Monitored {
    events: Vec<Option<ExitEvent>>,
    stopped: Vector3<f64>,
    outflow: bool,
}

fn monitor<D: Dynamics + Debug>(
    cfg: &SdeConfig<D>,
    d: &DomainBox,
    seed: u64,
    strides: &[usize],
) -> Result<Monitored> {
    let h = cfg.grid()?.step();
    let mut events: Vec<Option<ExitEvent>> = vec![None; strides.len()];
    let mut last: Vec<(f64, Vector3<f64>)> = vec![(0.0, cfg.x0.vec()); strides.len()];
    let mut open = strides.len();
    let mut outflow = false;
    let (_, terminal) = drive(cfg, seed, Control::None, |k, t, x| {
        if k == 0 {
            return ControlFlow::Continue(());
        }
        for (j, &stride) in strides.iter().enumerate() {
            if events[j].is_some() || k % stride != 0 {
                continue;
            }
            if d.contains(x) {
                last[j] = (t, *x);
            } else {
                let (t0, prev) = last[j];
                let (s, point, face) = d.crossing(&prev, x);
                if j == 0 {
                    outflow = d.is_outflow(&cfg.dynamics, t, &point, face);
                }
                events[j] = Some(ExitEvent { time: t0 + s * stride as f64 * h, state: State3::from(point), face });
                open -= 1;
            }
        }
        if open == 0 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    let stopped = events[0].map_or(terminal, |e| e.state.vec());
    Ok(Monitored { events, stopped, outflow })
}

fn monitor_ensemble<D: Dynamics + Debug>(
    cfg: &SdeConfig<D>,
    d: &DomainBox,
    n: usize,
    base_seed: u64,
    strides: &[usize],
) -> Result<Vec<Monitored>> {
    if n == 0 {
        return Err(Error::Config("exit study needs at least one trajectory".into()));
    }
    if strides.is_empty() || strides.contains(&0) {
        return Err(Error::Config("monitoring strides must be positive".into()));
    }
    cfg.validate()?;
    d.validate()?;
    check_start(d, &cfg.x0.vec())?;
    let results: Vec<Result<Monitored>> = (0..n)
        .into_par_iter()
        .map(|i| monitor(cfg, d, trajectory_seed(base_seed, i as u64), strides))
        .collect();
    collect_successes(results)
}

fn collect_successes<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut failed = 0;
    let mut first = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed += 1;
                first.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(Error::Simulation { failed, total, first: first.unwrap_or_default() });
    }
    Ok(ok)
}

/// Monte Carlo estimate of `q = P{tau <= T}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExitEstimate {
    pub q_hat: f64,
    /// 95% Wilson interval.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Trajectories that completed.
    pub n: usize,
    pub exits: usize,
    pub failed: usize,
    pub mean_exit_time_given_exit: Option<f64>,
    /// Exits through the part of the boundary where the drift points outward.
    pub outflow_exits: usize,
    pub eps_reg: f64,
    pub horizon: f64,
    /// Boundary checked every `stride` grid steps.
    pub stride: usize,
}

impl ExitEstimate {
    fn from_events(events: &[Option<ExitEvent>], requested: usize, outflow: usize, eps_reg: f64, horizon: f64, stride: usize) -> Result<Self> {
        let n = events.len();
        let times: Vec<f64> = events.iter().flatten().map(|e| e.time).collect();
        let exits = times.len();
        let (ci_low, ci_high) = wilson_interval(exits, n, 0.95)?;
        Ok(ExitEstimate {
            q_hat: exits as f64 / n as f64,
            ci_low,
            ci_high,
            n,
            exits,
            failed: requested - n,
            mean_exit_time_given_exit: (exits > 0).then(|| times.iter().sum::<f64>() / exits as f64),
            outflow_exits: outflow,
            eps_reg,
            horizon,
            stride,
        })
    }

    /// Binomial standard error of `q_hat`.
    pub fn std_error(&self) -> f64 {
        (self.q_hat * (1.0 - self.q_hat) / self.n as f64).sqrt()
    }
}

/// Exit probability by `cfg.horizon` from `cfg.x0`, the boundary checked at
/// every grid node.
pub fn exit_probability_mc<D: Dynamics + Debug>(
    cfg: &SdeConfig<D>,
    d: &DomainBox,
    n: usize,
    base_seed: u64,
) -> Result<ExitEstimate> {
    Ok(exit_probability_strided(cfg, d, n, base_seed, &[1])?.remove(0))
}

/// Exit probabilities of the same trajectories when the boundary is only
/// checked every `stride` grid steps, one estimate per stride.
pub fn exit_probability_strided<D: Dynamics + Debug>(
    cfg: &SdeConfig<D>,
    d: &DomainBox,
    n: usize,
    base_seed: u64,
    strides: &[usize],
) -> Result<Vec<ExitEstimate>> {
    let records = monitor_ensemble(cfg, d, n, base_seed, strides)?;
    let outflow = records.iter().filter(|r| r.outflow && r.events[0].is_some()).count();
    strides
        .iter()
        .enumerate()
        .map(|(j, &stride)| {
            let events: Vec<Option<ExitEvent>> = records.iter().map(|r| r.events[j]).collect();
            let out = if j == 0 { outflow } else { 0 };
            ExitEstimate::from_events(&events, n, out, cfg.eps_reg, cfg.horizon, stride)
        })
        .collect()
}

/// Discrete monitoring misses excursions between nodes, so `q(h)` sits
/// below the continuous-time value by roughly `c sqrt(h)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonitoringBias {
    pub fine: ExitEstimate,
    pub coarse: ExitEstimate,
    /// `q(h) - q(0)` estimated from the fine/coarse pair.
    pub bias: f64,
    /// `q(h)` with the bias removed.
    pub extrapolated: f64,
    /// Standard error of `extrapolated` (paired, same trajectories).
    pub extrapolated_se: f64,
}

/// Measures the monitoring bias by re-checking the same trajectories at
/// every second node and extrapolating in `sqrt(h)`.
pub fn monitoring_bias<D: Dynamics + Debug>(
    cfg: &SdeConfig<D>,
    d: &DomainBox,
    n: usize,
    base_seed: u64,
) -> Result<MonitoringBias> {
    let records = monitor_ensemble(cfg, d, n, base_seed, &[1, 2])?;
    let fine_events: Vec<Option<ExitEvent>> = records.iter().map(|r| r.events[0]).collect();
    let coarse_events: Vec<Option<ExitEvent>> = records.iter().map(|r| r.events[1]).collect();
    let outflow = records.iter().filter(|r| r.outflow && r.events[0].is_some()).count();
    let fine = ExitEstimate::from_events(&fine_events, n, outflow, cfg.eps_reg, cfg.horizon, 1)?;
    let coarse = ExitEstimate::from_events(&coarse_events, n, 0, cfg.eps_reg, cfg.horizon, 2)?;
    let r = 1.0 / (std::f64::consts::SQRT_2 - 1.0);
    // per-path extrapolated indicator: 1[fine] + r (1[fine] - 1[coarse])
    let per_path: Vec<f64> = records
        .iter()
        .map(|m| {
            let a = f64::from(u8::from(m.events[0].is_some()));
            let b = f64::from(u8::from(m.events[1].is_some()));
            a + r * (a - b)
        })
        .collect();
    let (extrapolated, var) = mean_var(&per_path);
    Ok(MonitoringBias {
        bias: fine.q_hat - extrapolated,
        extrapolated,
        extrapolated_se: (var / per_path.len() as f64).sqrt(),
        fine,
        coarse,
    })
}

/// Which part of the boundary a smoothed indicator treats as the exit side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitSide {
    /// Value 1 everywhere on or outside the boundary.
    #[default]
    Whole,
    /// Value 1 only where the drift points outward; tapered elsewhere.
    OutflowOnly,
}

/// A bounded function evaluated at the stopped state.
pub trait BoundaryFunction: Sync {
    fn value(&self, t: f64, x: &Vector3<f64>) -> f64;
}

impl<F: Fn(f64, &Vector3<f64>) -> f64 + Sync> BoundaryFunction for F {
    fn value(&self, t: f64, x: &Vector3<f64>) -> f64 {
        self(t, x)
    }
}

/// Continuous `psi_k` in `[0, 1]`: 1 on the exit side, 0 deeper than `1/k`
/// inside, linear across the collar.
#[derive(Clone, Copy)]
pub struct SmoothedIndicator<'a> {
    pub k: u32,
    pub domain: DomainBox,
    pub side: ExitSide,
    dynamics: Option<&'a dyn Dynamics>,
}

impl Debug for SmoothedIndicator<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SmoothedIndicator").field("k", &self.k).field("domain", &self.domain).field("side", &self.side).finish()
    }
}

pub fn smoothed_indicator(k: u32, d: &DomainBox) -> Result<SmoothedIndicator<'static>> {
    if k == 0 {
        return Err(Error::Config("smoothing index k must be at least 1".into()));
    }
    Ok(SmoothedIndicator { k, domain: *d, side: ExitSide::Whole, dynamics: None })
}

impl<'a> SmoothedIndicator<'a> {
    /// Restricts the value 1 to the outflow part of the boundary. The
    /// outflow weight `clamp(k <F, n>, 0, 1)` is taken at the projection
    /// onto the nearest face.
    pub fn outflow_only<'b>(self, dynamics: &'b dyn Dynamics) -> SmoothedIndicator<'b>
    where
        'a: 'b,
    {
        SmoothedIndicator { side: ExitSide::OutflowOnly, dynamics: Some(dynamics), ..self }
    }

    pub fn eval(&self, t: f64, x: &Vector3<f64>) -> f64 {
        let (face, dist) = self.domain.nearest_face(x);
        let k = f64::from(self.k);
        let ramp = if dist <= 0.0 { 1.0 } else { (1.0 - k * dist).max(0.0) };
        match (self.side, self.dynamics) {
            (ExitSide::OutflowOnly, Some(dynamics)) if ramp > 0.0 => {
                let mut p = *x;
                p[face.axis] = self.domain.face_value(face);
                let flux = dynamics.drift(t, &p).dot(&face.outward_normal());
                ramp * (k * flux).clamp(0.0, 1.0)
            }
            _ => ramp,
        }
    }
}

impl BoundaryFunction for SmoothedIndicator<'_> {
    fn value(&self, t: f64, x: &Vector3<f64>) -> f64 {
        self.eval(t, x)
    }
}

/// Mean of a bounded functional with a normal-approximation 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FunctionalEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub failed: usize,
}

/// `E[psi(X(theta))]` with `theta = tau ^ T`; the stopped state is the
/// interpolated boundary crossing or the terminal state.
pub fn boundary_functional_mc<D: Dynamics + Debug>(
    cfg: &SdeConfig<D>,
    d: &DomainBox,
    psi: &dyn BoundaryFunction,
    n: usize,
    base_seed: u64,
) -> Result<FunctionalEstimate> {
    let records = monitor_ensemble(cfg, d, n, base_seed, &[1])?;
    let values: Vec<f64> = records
        .iter()
        .map(|r| {
            let theta = r.events[0].map_or(cfg.horizon, |e| e.time);
            psi.value(theta, &r.stopped)
        })
        .collect();
    let (mean, var) = mean_var(&values);
    let std_error = (var / values.len() as f64).sqrt();
    let z = normal_quantile(0.95);
    Ok(FunctionalEstimate {
        mean,
        std_error,
        ci_low: mean - z * std_error,
        ci_high: mean + z * std_error,
        n: values.len(),
        failed: n - values.len(),
    })
}

/// One row of the coupled regularization study.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularizationRow {
    pub eps: f64,
    pub q_hat: f64,
    pub q_se: f64,
    /// `q_hat(eps) - q_hat(0)`.
    pub difference: f64,
    /// `sqrt(se(eps)^2 + se(0)^2)`.
    pub combined_se: f64,
    /// Standard error of the paired difference on shared noise.
    pub paired_se: f64,
    /// `E sup_t |X^eps(t) - X(t)|`.
    pub mean_sup_distance: f64,
    pub sup_distance_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularizationTable {
    pub rows: Vec<RegularizationRow>,
    pub n: usize,
    pub failed: usize,
    /// Whether `|q_hat(eps) - q_hat(0)| <= 2 combined SE` at the smallest
    /// positive `eps`.
    pub converged: bool,
}

impl RegularizationTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        crate::io::write_rows(
            out,
            &["eps", "q_hat", "q_se", "difference", "combined_se", "paired_se", "sup_distance", "sup_distance_se"],
            self.rows.iter().map(|r| {
                vec![r.eps, r.q_hat, r.q_se, r.difference, r.combined_se, r.paired_se, r.mean_sup_distance, r.sup_distance_se]
            }),
        )
    }
}

struct Coupled {
    exited: Vec<bool>,
    sup: Vec<f64>,
}

fn coupled_run<D: Dynamics + Debug + Clone>(
    cfg: &SdeConfig<D>,
    d: &DomainBox,
    seed: u64,
    eps_list: &[f64],
) -> Result<Coupled> {
    let base = SdeConfig { eps_reg: 0.0, ..cfg.clone() };
    let mut reference = Vec::with_capacity(base.grid()?.len());
    drive(&base, seed, Control::None, |_, _, x| {
        reference.push(*x);
        ControlFlow::Continue(())
    })?;
    let ref_exit = reference.iter().any(|x| !d.contains(x));
    let mut exited = Vec::with_capacity(eps_list.len());
    let mut sup = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        if eps == 0.0 {
            exited.push(ref_exit);
            sup.push(0.0);
            continue;
        }
        let run = SdeConfig { eps_reg: eps, ..cfg.clone() };
        let mut out = false;
        let mut dist = 0.0f64;
        drive(&run, seed, Control::None, |k, _, x| {
            out |= !d.contains(x);
            dist = dist.max((x - reference[k]).amax());
            ControlFlow::Continue(())
        })?;
        exited.push(out);
        sup.push(dist);
    }
    Ok(Coupled { exited, sup })
}

/// Exit probabilities of the regularized process for each `eps` on the
/// same `W` noise as the degenerate process (`eps = 0`), with the mean
/// sup-norm pathwise distance. `cfg.eps_reg` is ignored; `cfg.reg_noise`
/// selects how `V` enters.
pub fn regularization_convergence<D: Dynamics + Debug + Clone>(
    cfg: &SdeConfig<D>,
    d: &DomainBox,
    n: usize,
    base_seed: u64,
    eps_list: &[f64],
) -> Result<RegularizationTable> {
    if eps_list.is_empty() || *eps_list.last().expect("non-empty") != 0.0 {
        return Err(Error::Config("eps list must end at 0".into()));
    }
    if eps_list.windows(2).any(|w| !(w[0] > w[1])) || eps_list.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return Err(Error::Config(format!("eps list must be finite and strictly decreasing, got {eps_list:?}")));
    }
    if n < 2 {
        return Err(Error::Config("coupled study needs at least two trajectories".into()));
    }
    cfg.validate()?;
    d.validate()?;
    check_start(d, &cfg.x0.vec())?;
    let results: Vec<Result<Coupled>> = (0..n)
        .into_par_iter()
        .map(|i| coupled_run(cfg, d, trajectory_seed(base_seed, i as u64), eps_list))
        .collect();
    let runs = collect_successes(results)?;
    let m = runs.len();
    let zero = eps_list.len() - 1;
    let indicator = |r: &Coupled, j: usize| f64::from(u8::from(r.exited[j]));
    let (q0, v0) = mean_var(&runs.iter().map(|r| indicator(r, zero)).collect::<Vec<_>>());
    let rows: Vec<RegularizationRow> = eps_list
        .iter()
        .enumerate()
        .map(|(j, &eps)| {
            let (q, v) = mean_var(&runs.iter().map(|r| indicator(r, j)).collect::<Vec<_>>());
            let (_, vd) = mean_var(&runs.iter().map(|r| indicator(r, j) - indicator(r, zero)).collect::<Vec<_>>());
            let (sd, vs) = mean_var(&runs.iter().map(|r| r.sup[j]).collect::<Vec<_>>());
            let mf = m as f64;
            RegularizationRow {
                eps,
                q_hat: q,
                q_se: (v / mf).sqrt(),
                difference: q - q0,
                combined_se: ((v + v0) / mf).sqrt(),
                paired_se: (vd / mf).sqrt(),
                mean_sup_distance: sd,
                sup_distance_se: (vs / mf).sqrt(),
            }
        })
        .collect();
    let converged = match rows.len() {
        1 => true,
        len => {
            let r = &rows[len - 2];
            r.difference.abs() <= 2.0 * r.combined_se
        }
    };
    Ok(RegularizationTable { rows, n: m, failed: n - m, converged })
}
