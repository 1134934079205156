//! Command-line driver: one TOML file describes a run, a subcommand picks
//! the computation, and every artifact lands in the output directory next
//! to a manifest of checksums.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{action_linear, linearize_and_gramian, minimize_action, ActionSolver};
use crate::density::{
    estimate_density_samples, fit_sandwich_constant, sandwich_uniformity, EnvelopeForm, EnvelopeShape, KdeOptions,
    Marginal, Normalization, SandwichOptions,
};
use crate::error::{Error, Result};
use crate::exit::{
    boundary_functional_mc, exit_probability_mc, monitoring_bias, regularization_convergence, smoothed_indicator,
    DomainBox, ExitSide,
};
use crate::flow::{integrate_flow, TimeGrid};
use crate::model::{DiffusionSpec, ModelParams, State3};
use crate::scaling::{density_scaling_check, rescaled_diffusion, rescaler, RescaledDynamics};
use crate::sde::{hex_digest, simulate_ensemble, simulate_path, Control, EnsembleOptions, RegularizationNoise, SdeConfig};
use crate::streams::splitmix64;

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "OPIOID_LAB_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_FALSIFIED: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Flow,
    Simulate,
    Density,
    Sandwich,
    Action,
    Gramian,
    Exit,
    RescaleCheck,
}

#[derive(Debug, Parser)]
#[command(name = "opioid-lab", version, about = "Simulation and verification runs for the stochastic opioid-epidemic model")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Subcommand,
    /// TOML run configuration.
    pub config: PathBuf,
    /// Worker threads for the Monte Carlo loops (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides the base seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (beats the environment override and the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides a configuration entry, e.g. `--set exit.n=5000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_sigma() -> f64 {
    1.0
}
fn default_n() -> usize {
    10_000
}
fn default_bootstrap() -> usize {
    200
}
fn default_z() -> f64 {
    3.0
}
fn default_min_probes() -> usize {
    10
}
fn default_slope_floor() -> f64 {
    -1.0
}
fn default_intervals() -> usize {
    32
}
fn default_substeps() -> usize {
    16
}
fn default_min_ess() -> f64 {
    50.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(default = "default_sigma")]
    pub sigma_hat: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { sigma_hat: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub eps_reg: f64,
    #[serde(default)]
    pub reg_noise: RegularizationNoise,
    /// Also write every full path to `paths.bin`.
    #[serde(default)]
    pub keep_paths: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { n: default_n(), eps_reg: 0.0, reg_noise: RegularizationNoise::Shared, keep_paths: false }
    }
}

/// Probe points given as offsets from the deterministic endpoint in units
/// of the intrinsic widths `(t^{1/2}, t^{3/2}, t^{5/2})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub eps_reg: f64,
    #[serde(default)]
    pub reg_noise: RegularizationNoise,
    #[serde(default)]
    pub marginal: Marginal,
    pub offsets: Vec<[f64; 3]>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandwichConfig {
    /// Evaluation times; each must be a grid node of the run.
    pub times: Vec<f64>,
    /// Replaces the standard `t^{-p}` exponent of the envelope.
    #[serde(default)]
    pub prefactor_exponent: Option<f64>,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub form: EnvelopeForm,
    #[serde(default = "default_z")]
    pub z: f64,
    #[serde(default = "default_min_probes")]
    pub min_probes: usize,
    /// Smallest accepted log-log slope of the fitted constants against `t`.
    #[serde(default = "default_slope_floor")]
    pub slope_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionConfig {
    pub target: State3,
    #[serde(default = "default_intervals")]
    pub intervals: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitConfig {
    pub domain: DomainBox,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub eps_reg: f64,
    #[serde(default)]
    pub reg_noise: RegularizationNoise,
    /// Horizons at which `q` is estimated (default: the run horizon).
    #[serde(default)]
    pub horizons: Vec<f64>,
    /// Re-check every second node and report the extrapolated `q`.
    #[serde(default)]
    pub measure_bias: bool,
    /// Smoothing index of the boundary functional `psi_k`.
    #[serde(default)]
    pub k: Option<u32>,
    #[serde(default)]
    pub side: ExitSide,
    /// Decreasing regularization levels ending at 0 for the coupled study.
    #[serde(default)]
    pub eps_list: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescaleConfig {
    #[serde(default = "default_min_ess")]
    pub min_ess: f64,
    #[serde(default = "default_z")]
    pub z_tol: f64,
}

/// Everything one invocation needs; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir", skip_serializing)]
    pub out_dir: PathBuf,
    pub model: ModelParams,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    pub x0: State3,
    pub horizon: f64,
    pub step: f64,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub density: Option<DensityConfig>,
    #[serde(default)]
    pub sandwich: Option<SandwichConfig>,
    #[serde(default)]
    pub action: Option<ActionConfig>,
    #[serde(default)]
    pub exit: Option<ExitConfig>,
    #[serde(default)]
    pub rescale: Option<RescaleConfig>,
}

fn require<'a, T>(block: &'a Option<T>, name: &str) -> Result<&'a T> {
    block.as_ref().ok_or_else(|| Error::Config(format!("missing [{name}] section")))
}

fn check_eps(eps: f64, what: &str) -> Result<()> {
    if eps.is_finite() && eps >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{what}.eps_reg must be finite and >= 0, got {eps}")))
    }
}

fn check_times(times: &[f64], grid: &TimeGrid, what: &str) -> Result<()> {
    if times.is_empty() {
        return Err(Error::Config(format!("{what} needs at least one time")));
    }
    for t in times {
        if !(*t > 0.0) || grid.index_of(*t).is_none() {
            return Err(Error::Config(format!("{what}: {t} is not a positive node of the time grid")));
        }
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applying `key.path=value` overrides first.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn diffusion(&self) -> Result<DiffusionSpec> {
        DiffusionSpec::constant(self.diffusion.sigma_hat)
    }

    pub fn sde(&self, eps_reg: f64, noise: RegularizationNoise) -> Result<SdeConfig<ModelParams>> {
        Ok(SdeConfig::new(self.model, self.diffusion()?, self.x0, self.horizon, self.step).regularized(eps_reg, noise))
    }

    /// Checks every precondition of `command` before any computation.
    pub fn validate(&self, command: Subcommand) -> Result<()> {
        self.model.validate()?;
        self.diffusion()?;
        if !self.x0.is_finite() {
            return Err(Error::Config(format!("x0 must be finite, got {:?}", self.x0)));
        }
        let grid = TimeGrid::new(self.horizon, self.step)?;
        check_eps(self.simulate.eps_reg, "simulate")?;
        match command {
            Subcommand::Flow | Subcommand::Gramian => {}
            Subcommand::Simulate => {
                if self.simulate.n == 0 {
                    return Err(Error::Config("simulate.n must be at least 1".into()));
                }
            }
            Subcommand::Density | Subcommand::Sandwich | Subcommand::RescaleCheck => {
                let d = require(&self.density, "density")?;
                check_eps(d.eps_reg, "density")?;
                if d.n < 2 || d.offsets.is_empty() {
                    return Err(Error::Config("density needs n >= 2 and at least one probe offset".into()));
                }
                if command == Subcommand::Sandwich {
                    let s = require(&self.sandwich, "sandwich")?;
                    check_times(&s.times, &grid, "sandwich.times")?;
                    if let Normalization::Gaussian { a } = s.normalization {
                        if !(a > 0.0) {
                            return Err(Error::Config(format!("sandwich.normalization.a must be positive, got {a}")));
                        }
                    }
                }
                if command == Subcommand::RescaleCheck {
                    require(&self.rescale, "rescale")?;
                    if d.eps_reg != 0.0 {
                        return Err(Error::Config("rescale-check compares the degenerate process; set density.eps_reg = 0".into()));
                    }
                }
            }
            Subcommand::Action => {
                let a = require(&self.action, "action")?;
                if a.intervals < 4 || a.substeps == 0 {
                    return Err(Error::Config("action needs intervals >= 4 and substeps >= 1".into()));
                }
                if !a.target.is_finite() {
                    return Err(Error::Config("action.target must be finite".into()));
                }
            }
            Subcommand::Exit => {
                let e = require(&self.exit, "exit")?;
                e.domain.validate()?;
                check_eps(e.eps_reg, "exit")?;
                if !e.domain.contains(&self.x0.vec()) {
                    return Err(Error::Config("x0 must lie strictly inside exit.domain".into()));
                }
                if !e.horizons.is_empty() {
                    for t in &e.horizons {
                        TimeGrid::new(*t, self.step)?;
                    }
                }
                if e.k == Some(0) {
                    return Err(Error::Config("exit.k must be at least 1".into()));
                }
                if !e.eps_list.is_empty() && e.eps_list.last() != Some(&0.0) {
                    return Err(Error::Config("exit.eps_list must end at 0".into()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON rendering (output directory excluded).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(&Sha256::digest(json.as_bytes()))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for p in path {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Provenance record written next to the artifacts.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: Subcommand,
    pub config_hash: String,
    pub version: String,
    pub base_seed: u64,
    pub wall_clock_seconds: f64,
    /// Artifact file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub falsified: bool,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex_digest(&Sha256::digest(&bytes)))
}

/// Outcome of a run that completed without an error.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Passed,
    Falsified(String),
}

struct Artifacts<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl Artifacts<'_> {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.names.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let f = self.create(name)?;
        crate::io::write_json(f, value)
    }
}

fn kolmogorov_widths(t: f64) -> Vector3<f64> {
    Vector3::new(t.sqrt(), t.powf(1.5), t.powf(2.5))
}

fn probes_at(offsets: &[[f64; 3]], center: &Vector3<f64>, t: f64) -> Vec<Vector3<f64>> {
    let w = kolmogorov_widths(t);
    offsets.iter().map(|o| center + Vector3::from(*o).component_mul(&w)).collect()
}

fn kde_options(marginal: Marginal, bootstrap: usize, seed: u64) -> KdeOptions {
    KdeOptions { marginal, bootstrap, seed: splitmix64(seed ^ 0x6b64_6573), ..KdeOptions::default() }
}

#[derive(Serialize)]
struct SandwichSummary<'a> {
    reports: &'a [crate::density::SandwichReport],
    uniformity: &'a crate::density::UniformityReport,
}

#[derive(Serialize)]
struct ActionSummary<'a> {
    value: f64,
    endpoint: State3,
    endpoint_gap: f64,
    iterations: u64,
    converged: bool,
    final_penalty: f64,
    linear_action: Option<f64>,
    intervals: usize,
    target: &'a State3,
}

#[derive(Serialize)]
struct ExitSummary {
    estimates: Vec<crate::exit::ExitEstimate>,
    bias: Option<crate::exit::MonitoringBias>,
    functional: Option<crate::exit::FunctionalEstimate>,
    regularization: Option<crate::exit::RegularizationTable>,
}

/// Runs `command`, writing artifacts into `dir`; returns the artifact names.
pub fn execute(command: Subcommand, cfg: &RunConfig, dir: &Path) -> Result<(Vec<String>, Outcome)> {
    cfg.validate(command)?;
    fs::create_dir_all(dir)?;
    let mut out = Artifacts { dir, names: Vec::new() };
    let mut outcome = Outcome::Passed;
    let flow = integrate_flow(&cfg.model, &cfg.x0, cfg.horizon, cfg.step)?;
    match command {
        Subcommand::Flow => {
            flow.write_csv(out.create("flow.csv")?)?;
        }
        Subcommand::Simulate => {
            let s = &cfg.simulate;
            let sde = cfg.sde(s.eps_reg, s.reg_noise)?;
            let opts = EnsembleOptions { keep_paths: s.keep_paths, snapshot_times: Vec::new() };
            let ens = simulate_ensemble(&sde, s.n, cfg.seed, &opts)?;
            check_failures(ens.failures.len(), ens.n, ens.failures.first().map(|f| f.1.as_str()))?;
            ens.write_terminal_csv(out.create("terminal.csv")?)?;
            let first = simulate_path(&sde, crate::streams::trajectory_seed(cfg.seed, 0), Control::None)?;
            first.write_csv(out.create("path.csv")?)?;
            if s.keep_paths {
                ens.write_binary(out.create("paths.bin")?)?;
            }
        }
        Subcommand::Density => {
            let d = require(&cfg.density, "density")?;
            let sde = cfg.sde(d.eps_reg, d.reg_noise)?;
            let ens = simulate_ensemble(&sde, d.n, cfg.seed, &EnsembleOptions::default())?;
            check_failures(ens.failures.len(), ens.n, ens.failures.first().map(|f| f.1.as_str()))?;
            let probes = probes_at(&d.offsets, &flow.terminal().vec(), cfg.horizon);
            let est = estimate_density_samples(&ens.terminal, &probes, &kde_options(d.marginal, d.bootstrap, cfg.seed))?;
            est.write_csv(out.create("density.csv")?)?;
        }
        Subcommand::Sandwich => {
            let d = require(&cfg.density, "density")?;
            let s = require(&cfg.sandwich, "sandwich")?;
            let sde = cfg.sde(d.eps_reg, d.reg_noise)?;
            let opts = EnsembleOptions { keep_paths: false, snapshot_times: s.times.clone() };
            let ens = simulate_ensemble(&sde, d.n, cfg.seed, &opts)?;
            check_failures(ens.failures.len(), ens.n, ens.failures.first().map(|f| f.1.as_str()))?;
            let mut shape = EnvelopeShape::standard(d.marginal);
            shape.form = s.form;
            shape.normalization = s.normalization;
            if let Some(p) = s.prefactor_exponent {
                shape.prefactor_exponent = p;
            }
            let sopts = SandwichOptions { z: s.z, min_probes: s.min_probes, ..SandwichOptions::default() };
            let mut reports = Vec::with_capacity(s.times.len());
            for &t in &s.times {
                let k = flow.grid.index_of(t).expect("validated grid time");
                let center = flow.states[k];
                let samples = ens.snapshot(t).expect("snapshot recorded");
                let probes = probes_at(&d.offsets, &center, t);
                let est = estimate_density_samples(samples, &probes, &kde_options(d.marginal, d.bootstrap, cfg.seed))?;
                reports.push(fit_sandwich_constant(&est, t, &center, shape, &sopts)?);
            }
            let uniformity = sandwich_uniformity(&reports, s.slope_floor);
            crate::io::write_rows(
                out.create("sandwich.csv")?,
                &["t", "C", "reliable", "violated"],
                reports.iter().map(|r| vec![r.t, r.c.unwrap_or(f64::NAN), r.reliable as f64, f64::from(u8::from(r.violated))]),
            )?;
            out.json("sandwich.json", &SandwichSummary { reports: &reports, uniformity: &uniformity })?;
            if uniformity.violated {
                outcome = Outcome::Falsified(match uniformity.slope {
                    Some(slope) => format!("fitted constants scale like t^{slope:.3}, below the floor {}", s.slope_floor),
                    None => "no finite envelope constant reconciles the estimated density".into(),
                });
            }
        }
        Subcommand::Action => {
            let a = require(&cfg.action, "action")?;
            let solver = ActionSolver { substeps: a.substeps, ..ActionSolver::default() };
            let res = minimize_action(&cfg.model, &cfg.x0, &a.target, cfg.horizon, a.intervals, &solver)?;
            // the action carries no noise weight, so compare with the unit-noise Gramian
            let g = linearize_and_gramian(&cfg.model, &DiffusionSpec::constant(1.0)?, &cfg.x0, cfg.horizon, cfg.step)?;
            let linear_action = action_linear(&g, &flow.terminal(), &a.target).ok();
            out.json(
                "action.json",
                &ActionSummary {
                    value: res.value,
                    endpoint: res.endpoint,
                    endpoint_gap: res.endpoint_gap,
                    iterations: res.iterations,
                    converged: res.converged,
                    final_penalty: res.final_penalty,
                    linear_action,
                    intervals: res.control.intervals(),
                    target: &a.target,
                },
            )?;
            res.write_trace_csv(out.create("action_trace.csv")?, &cfg.model, &cfg.x0, a.substeps)?;
        }
        Subcommand::Gramian => {
            let g = linearize_and_gramian(&cfg.model, &cfg.diffusion()?, &cfg.x0, cfg.horizon, cfg.step)?;
            g.write_json(out.create("gramian.json")?)?;
        }
        Subcommand::Exit => {
            let e = require(&cfg.exit, "exit")?;
            let sde = cfg.sde(e.eps_reg, e.reg_noise)?;
            let horizons = if e.horizons.is_empty() { vec![cfg.horizon] } else { e.horizons.clone() };
            let estimates = horizons
                .iter()
                .map(|&t| exit_probability_mc(&sde.with_horizon(t), &e.domain, e.n, cfg.seed))
                .collect::<Result<Vec<_>>>()?;
            crate::io::write_rows(
                out.create("exit.csv")?,
                &["T", "q_hat", "ci_low", "ci_high", "n", "exits"],
                estimates.iter().map(|q| vec![q.horizon, q.q_hat, q.ci_low, q.ci_high, q.n as f64, q.exits as f64]),
            )?;
            let bias = e.measure_bias.then(|| monitoring_bias(&sde, &e.domain, e.n, cfg.seed)).transpose()?;
            let functional = match e.k {
                Some(k) => {
                    let psi = smoothed_indicator(k, &e.domain)?;
                    let est = match e.side {
                        ExitSide::Whole => boundary_functional_mc(&sde, &e.domain, &psi, e.n, cfg.seed)?,
                        ExitSide::OutflowOnly => {
                            let psi = psi.outflow_only(&cfg.model);
                            boundary_functional_mc(&sde, &e.domain, &psi, e.n, cfg.seed)?
                        }
                    };
                    Some(est)
                }
                None => None,
            };
            let regularization = if e.eps_list.is_empty() {
                None
            } else {
                let table = regularization_convergence(&sde, &e.domain, e.n, cfg.seed, &e.eps_list)?;
                table.write_csv(out.create("regularization.csv")?)?;
                Some(table)
            };
            out.json("exit.json", &ExitSummary { estimates, bias, functional, regularization })?;
        }
        Subcommand::RescaleCheck => {
            let d = require(&cfg.density, "density")?;
            let r = require(&cfg.rescale, "rescale")?;
            let t = cfg.horizon;
            let sde = cfg.sde(0.0, d.reg_noise)?;
            let ens = simulate_ensemble(&sde, d.n, cfg.seed, &EnsembleOptions::default())?;
            check_failures(ens.failures.len(), ens.n, ens.failures.first().map(|f| f.1.as_str()))?;
            let m = rescaler(t)?;
            let unit = SdeConfig::new(
                RescaledDynamics::new(cfg.model, t)?,
                rescaled_diffusion(&cfg.diffusion()?, t)?,
                State3::from(cfg.x0.vec().component_mul(&m)),
                1.0,
                cfg.step / t,
            );
            let ens_unit = simulate_ensemble(&unit, d.n, splitmix64(cfg.seed ^ 0x7265_7363), &EnsembleOptions::default())?;
            check_failures(ens_unit.failures.len(), ens_unit.n, ens_unit.failures.first().map(|f| f.1.as_str()))?;
            let probes = probes_at(&d.offsets, &flow.terminal().vec(), t);
            let mapped: Vec<Vector3<f64>> = probes.iter().map(|y| y.component_mul(&m)).collect();
            let kde = kde_options(d.marginal, d.bootstrap, cfg.seed);
            let p = estimate_density_samples(&ens.terminal, &probes, &kde)?;
            let p_tilde = estimate_density_samples(&ens_unit.terminal, &mapped, &kde)?;
            let report = density_scaling_check(&p, &p_tilde, t, r.min_ess, r.z_tol)?;
            out.json("rescale.json", &report)?;
            if !report.passed {
                outcome = Outcome::Falsified(format!(
                    "rescaled density deviates by {:.2} combined standard errors (band {})",
                    report.max_z, r.z_tol
                ));
            }
        }
    }
    Ok((out.names, outcome))
}

fn check_failures(failed: usize, total: usize, first: Option<&str>) -> Result<()> {
    if failed as f64 > crate::exit::MAX_FAILURE_FRACTION * total as f64 {
        return Err(Error::Simulation { failed, total, first: first.unwrap_or_default().to_string() });
    }
    Ok(())
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Io(_) => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

fn resolve_out_dir(args: &Args, cfg: &RunConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| cfg.out_dir.clone())
}

fn run_args(args: &Args) -> Result<(RunManifest, Outcome)> {
    let start = Instant::now();
    let mut cfg = RunConfig::load(&args.config, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dir = resolve_out_dir(args, &cfg);
    let (names, outcome) = match args.workers {
        Some(0) => return Err(Error::Config("--workers must be at least 1".into())),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| execute(args.command, &cfg, &dir))?,
        None => execute(args.command, &cfg, &dir)?,
    };
    let outputs = names
        .iter()
        .map(|n| Ok((n.clone(), file_sha256(&dir.join(n))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let manifest = RunManifest {
        command: args.command,
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        base_seed: cfg.seed,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs,
        falsified: matches!(outcome, Outcome::Falsified(_)),
    };
    crate::io::write_json(BufWriter::new(File::create(dir.join("manifest.json"))?), &manifest)?;
    Ok((manifest, outcome))
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run_args(&args) {
        Ok((_, Outcome::Passed)) => EXIT_OK,
        Ok((_, Outcome::Falsified(msg))) => {
            eprintln!("falsified: {msg}");
            EXIT_FALSIFIED
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
