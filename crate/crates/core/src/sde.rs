//! Euler–Maruyama simulation of the degenerate SDE, its controlled version
//! and the regularized companion with extra noise on `x2, x3`.
//!
//! ```text
//! dX = (F(t, X) + B u(t)) dt + B sigma_hat(t, X) dW + sqrt(eps_reg) (0, dV2, dV3)
//! ```
//!
//! With `RegularizationNoise::Shared` the same `dV` drives `x2` and `x3`.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::ops::ControlFlow;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::TimeGrid;
use crate::model::{DiffusionSpec, Dynamics, State3};
use crate::streams::{trajectory_seed, NoiseStreams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationNoise {
    /// One `V` in both the `x2` and `x3` equations.
    #[default]
    Shared,
    /// Independent `V2`, `V3`.
    Independent,
}

/// Piecewise-constant scalar control on `N` equal subintervals of `[0, T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub horizon: f64,
    pub values: Vec<f64>,
}

impl ControlSignal {
    pub fn new(horizon: f64, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("control needs at least one interval".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::Config(format!("control horizon must be positive, got {horizon}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("control values must be finite".into()));
        }
        Ok(ControlSignal { horizon, values })
    }

    pub fn zeros(horizon: f64, intervals: usize) -> Result<Self> {
        Self::new(horizon, vec![0.0; intervals])
    }

    pub fn intervals(&self) -> usize {
        self.values.len()
    }

    pub fn interval_length(&self) -> f64 {
        self.horizon / self.values.len() as f64
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let n = self.values.len();
        let j = ((t / self.interval_length()).floor().max(0.0) as usize).min(n - 1);
        self.values[j]
    }

    /// `integral of u^2 dt`.
    pub fn squared_integral(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() * self.interval_length()
    }
}

type Feedback<'a> = &'a (dyn Fn(f64, &Vector3<f64>) -> Result<f64> + Sync);

/// Control entering through `B` alongside the noise.
#[derive(Clone, Copy)]
pub enum Control<'a> {
    None,
    OpenLoop(&'a ControlSignal),
    Feedback(Feedback<'a>),
}

impl Control<'_> {
    fn value(&self, t: f64, x: &Vector3<f64>) -> Result<f64> {
        match self {
            Control::None => Ok(0.0),
            Control::OpenLoop(c) => Ok(c.value_at(t)),
            Control::Feedback(f) => f(t, x),
        }
    }
}

/// Everything that defines one trajectory law.
#[derive(Clone, Debug)]
pub struct SdeConfig<D> {
    pub dynamics: D,
    pub diffusion: DiffusionSpec,
    pub x0: State3,
    pub horizon: f64,
    pub step: f64,
    pub eps_reg: f64,
    pub reg_noise: RegularizationNoise,
}

impl<D: Dynamics + Debug> SdeConfig<D> {
    pub fn new(dynamics: D, diffusion: DiffusionSpec, x0: State3, horizon: f64, step: f64) -> Self {
        SdeConfig {
            dynamics,
            diffusion,
            x0,
            horizon,
            step,
            eps_reg: 0.0,
            reg_noise: RegularizationNoise::Shared,
        }
    }

    pub fn regularized(mut self, eps_reg: f64, noise: RegularizationNoise) -> Self {
        self.eps_reg = eps_reg;
        self.reg_noise = noise;
        self
    }

    pub fn with_horizon(&self, horizon: f64) -> Self
    where
        D: Clone,
    {
        SdeConfig { horizon, ..self.clone() }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.step)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if !self.x0.is_finite() {
            return Err(Error::Domain(format!("initial state is not finite: {:?}", self.x0)));
        }
        if !(self.eps_reg >= 0.0) || !self.eps_reg.is_finite() {
            return Err(Error::Config(format!("eps_reg must be finite and >= 0, got {}", self.eps_reg)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the configuration's debug rendering.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{self:?}").as_bytes());
        hex_digest(&h.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One Euler–Maruyama step with pre-drawn standard normals.
#[inline]
pub(crate) fn em_step<D: Dynamics>(
    cfg: &SdeConfig<D>,
    t: f64,
    x: &Vector3<f64>,
    h: f64,
    u: f64,
    z_w: f64,
    z_v: (f64, f64),
) -> Result<Vector3<f64>> {
    let sq = h.sqrt();
    let sigma = cfg.diffusion.eval(t, x)?;
    let mut next = x + h * cfg.dynamics.drift(t, x);
    next[0] += h * u + sigma * sq * z_w;
    if cfg.eps_reg > 0.0 {
        let s = cfg.eps_reg.sqrt() * sq;
        next[1] += s * z_v.0;
        next[2] += s * z_v.1;
    }
    Ok(next)
}

#[inline]
pub(crate) fn draw_v(cfg_eps: f64, noise: RegularizationNoise, streams: &mut NoiseStreams) -> (f64, f64) {
    if cfg_eps > 0.0 {
        match noise {
            RegularizationNoise::Shared => {
                let z = streams.v();
                (z, z)
            }
            RegularizationNoise::Independent => (streams.v(), streams.v()),
        }
    } else {
        (0.0, 0.0)
    }
}

/// Runs one trajectory, handing every node (including `t = 0`) to
/// `observer`; stops early when the observer breaks. Returns the index and
/// state of the last node visited.
pub fn drive<D, F>(
    cfg: &SdeConfig<D>,
    seed: u64,
    control: Control<'_>,
    mut observer: F,
) -> Result<(usize, Vector3<f64>)>
where
    D: Dynamics + Debug,
    F: FnMut(usize, f64, &Vector3<f64>) -> ControlFlow<()>,
{
    let grid = cfg.grid()?;
    if let Control::OpenLoop(c) = control {
        if (c.horizon - cfg.horizon).abs() > 1e-12 * cfg.horizon.max(1.0) {
            return Err(Error::Config(format!(
                "control horizon {} does not match simulation horizon {}",
                c.horizon, cfg.horizon
            )));
        }
    }
    let h = grid.step();
    let mut streams = NoiseStreams::new(seed);
    let mut x = cfg.x0.vec();
    if observer(0, 0.0, &x).is_break() {
        return Ok((0, x));
    }
    for k in 0..grid.steps {
        let t = grid.time(k);
        let u = control.value(t, &x)?;
        let z_w = streams.w();
        let z_v = draw_v(cfg.eps_reg, cfg.reg_noise, &mut streams);
        x = em_step(cfg, t, &x, h, u, z_w, z_v)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration {
                time: grid.time(k + 1),
                detail: "non-finite SDE state".into(),
            });
        }
        if observer(k + 1, grid.time(k + 1), &x).is_break() {
            return Ok((k + 1, x));
        }
    }
    Ok((grid.steps, x))
}

/// A simulated trajectory on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SdePath {
    pub grid: TimeGrid,
    pub states: Vec<Vector3<f64>>,
    pub seed: u64,
    pub regularization: f64,
}

impl SdePath {
    pub fn terminal(&self) -> Vector3<f64> {
        *self.states.last().expect("non-empty path")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        crate::io::write_state_csv(out, &self.grid.times(), &self.states)
    }
}

/// Full path under `cfg` (regularized when `cfg.eps_reg > 0`).
pub fn simulate_path<D: Dynamics + Debug>(cfg: &SdeConfig<D>, seed: u64, control: Control<'_>) -> Result<SdePath> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut states = Vec::with_capacity(grid.len());
    drive(cfg, seed, control, |_, _, x| {
        states.push(*x);
        ControlFlow::Continue(())
    })?;
    Ok(SdePath { grid, states, seed, regularization: cfg.eps_reg })
}

/// Degenerate SDE: noise on `x1` only, optional open-loop control.
#[allow(clippy::too_many_arguments)]
pub fn simulate_degenerate<D: Dynamics + Debug + Clone>(
    dynamics: &D,
    diffusion: &DiffusionSpec,
    x0: &State3,
    horizon: f64,
    h: f64,
    seed: u64,
    control: Option<&ControlSignal>,
) -> Result<SdePath> {
    let cfg = SdeConfig::new(dynamics.clone(), diffusion.clone(), *x0, horizon, h);
    let control = control.map_or(Control::None, Control::OpenLoop);
    simulate_path(&cfg, seed, control)
}

/// Regularized SDE with `sqrt(eps_reg) dV` on `x2` and `x3` (shared `V`).
#[allow(clippy::too_many_arguments)]
pub fn simulate_regularized<D: Dynamics + Debug + Clone>(
    dynamics: &D,
    diffusion: &DiffusionSpec,
    eps_reg: f64,
    x0: &State3,
    horizon: f64,
    h: f64,
    seed: u64,
) -> Result<SdePath> {
    if !(eps_reg > 0.0) {
        return Err(Error::Config(format!("eps_reg must be positive, got {eps_reg}")));
    }
    let cfg = SdeConfig::new(dynamics.clone(), diffusion.clone(), *x0, horizon, h)
        .regularized(eps_reg, RegularizationNoise::Shared);
    simulate_path(&cfg, seed, Control::None)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnsembleOptions {
    pub keep_paths: bool,
    /// Grid times at which every trajectory's state is additionally recorded.
    pub snapshot_times: Vec<f64>,
}

/// Seeded collection of trajectories. Vectors are ordered by trajectory
/// index; failed trajectories are listed in `failures` and absent from the
/// state vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub n: usize,
    pub base_seed: u64,
    pub config_hash: String,
    pub grid: TimeGrid,
    pub eps_reg: f64,
    pub indices: Vec<usize>,
    pub terminal: Vec<Vector3<f64>>,
    pub snapshots: Vec<(f64, Vec<Vector3<f64>>)>,
    pub paths: Option<Vec<Vec<Vector3<f64>>>>,
    pub failures: Vec<(usize, String)>,
}

impl PathEnsemble {
    pub fn failure_fraction(&self) -> f64 {
        self.failures.len() as f64 / self.n as f64
    }

    pub fn snapshot(&self, t: f64) -> Option<&[Vector3<f64>]> {
        self.snapshots
            .iter()
            .find(|(s, _)| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
            .map(|(_, v)| v.as_slice())
    }

    /// Terminal states as `index,x1,x2,x3` rows.
    pub fn write_terminal_csv<W: Write>(&self, out: W) -> Result<()> {
        crate::io::write_rows(
            out,
            &["index", "x1", "x2", "x3"],
            self.indices
                .iter()
                .zip(&self.terminal)
                .map(|(i, x)| vec![*i as f64, x[0], x[1], x[2]]),
        )
    }

    /// Compact binary dump of full paths:
    /// magic `OPLP`, version `u32`, 64-byte ASCII config hash, `n_paths u64`,
    /// `n_nodes u64`, horizon `f64`, then per path its index `u64` and
    /// `3 * n_nodes` little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let paths = self
            .paths
            .as_ref()
            .ok_or_else(|| Error::Config("ensemble was generated without full paths".into()))?;
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&BINARY_VERSION.to_le_bytes())?;
        let mut hash = [b'0'; 64];
        let src = self.config_hash.as_bytes();
        hash[..src.len().min(64)].copy_from_slice(&src[..src.len().min(64)]);
        out.write_all(&hash)?;
        out.write_all(&(paths.len() as u64).to_le_bytes())?;
        out.write_all(&(self.grid.len() as u64).to_le_bytes())?;
        out.write_all(&self.grid.horizon.to_le_bytes())?;
        for (idx, path) in self.indices.iter().zip(paths) {
            out.write_all(&(*idx as u64).to_le_bytes())?;
            for x in path {
                for v in x.iter() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

const BINARY_MAGIC: &[u8; 4] = b"OPLP";
const BINARY_VERSION: u32 = 1;

/// Contents of a binary path dump.
#[derive(Clone, Debug, PartialEq)]
pub struct PathDump {
    pub config_hash: String,
    pub horizon: f64,
    pub indices: Vec<usize>,
    pub paths: Vec<Vec<Vector3<f64>>>,
}

pub fn read_binary<R: Read>(mut input: R) -> Result<PathDump> {
    let mut buf4 = [0u8; 4];
    input.read_exact(&mut buf4)?;
    if &buf4 != BINARY_MAGIC {
        return Err(Error::Io("not a path dump (bad magic)".into()));
    }
    input.read_exact(&mut buf4)?;
    if u32::from_le_bytes(buf4) != BINARY_VERSION {
        return Err(Error::Io("unsupported path dump version".into()));
    }
    let mut hash = [0u8; 64];
    input.read_exact(&mut hash)?;
    let mut buf8 = [0u8; 8];
    let mut read_u64 = |input: &mut R| -> Result<u64> {
        input.read_exact(&mut buf8)?;
        Ok(u64::from_le_bytes(buf8))
    };
    let n_paths = read_u64(&mut input)? as usize;
    let n_nodes = read_u64(&mut input)? as usize;
    let horizon = f64::from_bits(read_u64(&mut input)?);
    let mut indices = Vec::with_capacity(n_paths);
    let mut paths = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        indices.push(read_u64(&mut input)? as usize);
        let mut path = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let a = f64::from_bits(read_u64(&mut input)?);
            let b = f64::from_bits(read_u64(&mut input)?);
            let c = f64::from_bits(read_u64(&mut input)?);
            path.push(Vector3::new(a, b, c));
        }
        paths.push(path);
    }
    Ok(PathDump {
        config_hash: String::from_utf8_lossy(&hash).into_owned(),
        horizon,
        indices,
        paths,
    })
}

struct Trajectory {
    terminal: Vector3<f64>,
    snapshots: Vec<Vector3<f64>>,
    path: Option<Vec<Vector3<f64>>>,
}

/// `n` trajectories under the counter-based seed scheme. Per-trajectory
/// failures are recorded, not fatal.
pub fn simulate_ensemble<D: Dynamics + Debug>(
    cfg: &SdeConfig<D>,
    n: usize,
    base_seed: u64,
    options: &EnsembleOptions,
) -> Result<PathEnsemble> {
    if n == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    cfg.validate()?;
    let grid = cfg.grid()?;
    let snap_idx: Vec<usize> = options
        .snapshot_times
        .iter()
        .map(|t| {
            grid.index_of(*t)
                .ok_or_else(|| Error::Config(format!("snapshot time {t} is not a grid node")))
        })
        .collect::<Result<_>>()?;

    let results: Vec<Result<Trajectory>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = trajectory_seed(base_seed, i as u64);
            let mut snaps = vec![Vector3::zeros(); snap_idx.len()];
            let mut path = options.keep_paths.then(|| Vec::with_capacity(grid.len()));
            let (_, terminal) = drive(cfg, seed, Control::None, |k, _, x| {
                for (slot, &idx) in snaps.iter_mut().zip(&snap_idx) {
                    if idx == k {
                        *slot = *x;
                    }
                }
                if let Some(p) = path.as_mut() {
                    p.push(*x);
                }
                ControlFlow::Continue(())
            })?;
            Ok(Trajectory { terminal, snapshots: snaps, path })
        })
        .collect();

    let mut ens = PathEnsemble {
        n,
        base_seed,
        config_hash: cfg.config_hash(),
        grid,
        eps_reg: cfg.eps_reg,
        indices: Vec::with_capacity(n),
        terminal: Vec::with_capacity(n),
        snapshots: options.snapshot_times.iter().map(|t| (*t, Vec::with_capacity(n))).collect(),
        paths: options.keep_paths.then(Vec::new),
        failures: Vec::new(),
    };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(traj) => {
                ens.indices.push(i);
                ens.terminal.push(traj.terminal);
                for (slot, x) in ens.snapshots.iter_mut().zip(traj.snapshots) {
                    slot.1.push(x);
                }
                if let (Some(all), Some(p)) = (ens.paths.as_mut(), traj.path) {
                    all.push(p);
                }
            }
            Err(e) => ens.failures.push((i, e.to_string())),
        }
    }
    Ok(ens)
}
