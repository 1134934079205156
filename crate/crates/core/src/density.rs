//! Transition-density estimation, two-sided Gaussian envelopes, sandwich
//! constant fitting and the mollified value function `J_eps = -ln E eta_eps(X)`.

use std::f64::consts::PI;
use std::fmt::Debug;
use std::io::Write;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::integrate_flow;
use crate::model::{Dynamics, State3};
use crate::sde::{simulate_ensemble, EnsembleOptions, PathEnsemble, SdeConfig};
use crate::stats::{mean_var, ols_slope};

/// Smallest per-coordinate variance accepted by the full 3-D estimator.
pub const VARIANCE_GATE: f64 = 1e-12;

/// Which coordinates the density is taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marginal {
    #[default]
    Full,
    /// The `x1` marginal; only the first probe coordinate is used.
    X1,
}

impl Marginal {
    pub fn dims(&self) -> usize {
        match self {
            Marginal::Full => 3,
            Marginal::X1 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule per coordinate.
    #[default]
    Auto,
    Fixed(Vector3<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdeOptions {
    pub marginal: Marginal,
    pub bandwidth: Bandwidth,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for KdeOptions {
    fn default() -> Self {
        KdeOptions {
            marginal: Marginal::Full,
            bandwidth: Bandwidth::Auto,
            bootstrap: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityEstimate {
    pub marginal: Marginal,
    pub n: usize,
    pub probes: Vec<Vector3<f64>>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub bandwidth: Vector3<f64>,
    /// Kish effective sample size of the kernel weights at each probe.
    pub ess: Vec<f64>,
}

impl DensityEstimate {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        crate::io::write_rows(
            out,
            &["y1", "y2", "y3", "p_hat", "se", "ess"],
            (0..self.probes.len()).map(|i| {
                let y = self.probes[i];
                vec![y[0], y[1], y[2], self.values[i], self.std_errors[i], self.ess[i]]
            }),
        )
    }
}

/// Silverman plug-in bandwidths `sigma_i (4 / ((d + 2) n))^{1/(d+4)}`.
pub fn silverman_bandwidth(samples: &[Vector3<f64>], marginal: Marginal) -> Vector3<f64> {
    let d = marginal.dims() as f64;
    let n = samples.len() as f64;
    let factor = (4.0 / ((d + 2.0) * n)).powf(1.0 / (d + 4.0));
    Vector3::from_fn(|c, _| {
        let col: Vec<f64> = samples.iter().map(|x| x[c]).collect();
        mean_var(&col).1.sqrt() * factor
    })
}

fn check_variance(samples: &[Vector3<f64>], marginal: Marginal) -> Result<()> {
    for c in 0..marginal.dims() {
        let col: Vec<f64> = samples.iter().map(|x| x[c]).collect();
        let var = mean_var(&col).1;
        if !(var >= VARIANCE_GATE) {
            return Err(Error::DegenerateDirection { coordinate: c + 1, variance: var });
        }
    }
    Ok(())
}

/// Product-Gaussian kernel density estimate at each probe with bootstrap
/// standard errors. Bootstrap resamples are shared across probes.
pub fn estimate_density_samples(
    samples: &[Vector3<f64>],
    probes: &[Vector3<f64>],
    opts: &KdeOptions,
) -> Result<DensityEstimate> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Insufficient(format!("density estimation needs at least 2 samples, got {n}")));
    }
    if probes.is_empty() {
        return Err(Error::Config("no probe points given".into()));
    }
    check_variance(samples, opts.marginal)?;
    let dims = opts.marginal.dims();
    let bandwidth = match opts.bandwidth {
        Bandwidth::Auto => silverman_bandwidth(samples, opts.marginal),
        Bandwidth::Fixed(h) => h,
    };
    if (0..dims).any(|c| !(bandwidth[c] > 0.0) || !bandwidth[c].is_finite()) {
        return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth:?}")));
    }
    let norm: f64 = (0..dims).map(|c| 1.0 / ((2.0 * PI).sqrt() * bandwidth[c])).product();

    // Multiplicities of each sample in each bootstrap resample.
    let mut counts = vec![0u8; opts.bootstrap * n];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for b in 0..opts.bootstrap {
        let row = &mut counts[b * n..(b + 1) * n];
        for _ in 0..n {
            let i = rng.random_range(0..n);
            row[i] = row[i].saturating_add(1);
        }
    }

    let per_probe: Vec<(f64, f64, f64)> = probes
        .par_iter()
        .map(|y| {
            let k: Vec<f64> = samples
                .iter()
                .map(|x| {
                    let mut e = 0.0;
                    for c in 0..dims {
                        let u = (y[c] - x[c]) / bandwidth[c];
                        e += u * u;
                    }
                    norm * (-0.5 * e).exp()
                })
                .collect();
            let sum: f64 = k.iter().sum();
            let sum_sq: f64 = k.iter().map(|v| v * v).sum();
            let value = sum / n as f64;
            let ess = if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 };
            let se = if opts.bootstrap >= 2 {
                let boots: Vec<f64> = (0..opts.bootstrap)
                    .map(|b| {
                        let row = &counts[b * n..(b + 1) * n];
                        row.iter().zip(&k).map(|(c, v)| *c as f64 * v).sum::<f64>() / n as f64
                    })
                    .collect();
                mean_var(&boots).1.sqrt()
            } else {
                let (_, var) = mean_var(&k);
                (var / n as f64).sqrt()
            };
            (value, se, ess)
        })
        .collect();

    Ok(DensityEstimate {
        marginal: opts.marginal,
        n,
        probes: probes.to_vec(),
        values: per_probe.iter().map(|r| r.0).collect(),
        std_errors: per_probe.iter().map(|r| r.1).collect(),
        bandwidth,
        ess: per_probe.iter().map(|r| r.2).collect(),
    })
}

/// Density of the ensemble's terminal states.
pub fn estimate_density(ens: &PathEnsemble, probes: &[Vector3<f64>], opts: &KdeOptions) -> Result<DensityEstimate> {
    estimate_density_samples(&ens.terminal, probes, opts)
}

/// How the quadratic form inside the envelope exponent is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeForm {
    /// `|t^{1/2} Gamma(t)^{-1} (Theta - y)|^2 = sum_i d_i^2 / t^{2i-1}`.
    #[default]
    Kolmogorov,
    /// `t Gamma(t)`-weighted squared distance `sum_i t^{i+1} d_i^2`.
    Literal,
}

/// Prefactor convention of the envelope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// `C^{-1} t^{-p} e^{-C q}` and `C t^{-p} e^{-q/C}`.
    #[default]
    Bare,
    /// Gaussian-normalised: `(2 pi a)^{-d/2}` in front and `q / (2a)` in the exponent.
    Gaussian { a: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeShape {
    pub form: EnvelopeForm,
    pub marginal: Marginal,
    /// `p` in the `t^{-p}` prefactor.
    pub prefactor_exponent: f64,
    pub normalization: Normalization,
}

impl EnvelopeShape {
    /// Exponent `9/2` on the full state, `1/2` on the `x1` marginal.
    pub fn standard(marginal: Marginal) -> Self {
        EnvelopeShape {
            form: EnvelopeForm::Kolmogorov,
            marginal,
            prefactor_exponent: match marginal {
                Marginal::Full => 4.5,
                Marginal::X1 => 0.5,
            },
            normalization: Normalization::Bare,
        }
    }

    pub fn quadratic_form(&self, t: f64, d: &Vector3<f64>) -> f64 {
        (0..self.marginal.dims())
            .map(|i| {
                let k = (i + 1) as i32;
                match self.form {
                    EnvelopeForm::Kolmogorov => d[i] * d[i] / t.powi(2 * k - 1),
                    EnvelopeForm::Literal => t.powi(k + 1) * d[i] * d[i],
                }
            })
            .sum()
    }

    /// `ln` of the prefactor and the factor applied to `q` in the exponent.
    fn scale(&self, t: f64) -> (f64, f64) {
        let base = -self.prefactor_exponent * t.ln();
        match self.normalization {
            Normalization::Bare => (base, 1.0),
            Normalization::Gaussian { a } => {
                let d = self.marginal.dims() as f64;
                (base - 0.5 * d * (2.0 * PI * a).ln(), 0.5 / a)
            }
        }
    }

    /// `ln` of the lower and upper bounds for constant `c` and form value `q`.
    pub fn log_bounds(&self, c: f64, t: f64, q: f64) -> (f64, f64) {
        let (ln_k, s) = self.scale(t);
        (ln_k - c.ln() - c * s * q, ln_k + c.ln() - s * q / c)
    }
}

/// Two-sided envelope around the deterministic endpoint `center = Theta(t, x0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GaussianEnvelope {
    pub c: f64,
    pub t: f64,
    pub center: Vector3<f64>,
    pub shape: EnvelopeShape,
}

impl GaussianEnvelope {
    pub fn new(c: f64, t: f64, center: Vector3<f64>, shape: EnvelopeShape) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("envelope time must be positive, got {t}")));
        }
        if !(c > 1.0) {
            return Err(Error::Domain(format!("envelope constant must exceed 1, got {c}")));
        }
        Ok(GaussianEnvelope { c, t, center, shape })
    }

    pub fn quadratic_form(&self, y: &Vector3<f64>) -> f64 {
        self.shape.quadratic_form(self.t, &(self.center - y))
    }

    pub fn bounds(&self, y: &Vector3<f64>) -> (f64, f64) {
        let (lo, hi) = self.shape.log_bounds(self.c, self.t, self.quadratic_form(y));
        (lo.exp(), hi.exp())
    }
}

/// Envelope bounds at `y` with the centre taken from the deterministic flow.
#[allow(clippy::too_many_arguments)]
pub fn gaussian_envelope<D: Dynamics + ?Sized>(
    c: f64,
    t: f64,
    x0: &State3,
    y: &State3,
    dynamics: &D,
    shape: EnvelopeShape,
    h: f64,
) -> Result<(f64, f64)> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("envelope time must be positive, got {t}")));
    }
    let center = integrate_flow(dynamics, x0, t, h.min(t))?.terminal().vec();
    Ok(GaussianEnvelope::new(c, t, center, shape)?.bounds(&y.vec()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SandwichOptions {
    /// Width of the tolerance band in standard errors.
    pub z: f64,
    pub c_min: f64,
    /// Constants above this are treated as "no finite C".
    pub c_max: f64,
    pub min_probes: usize,
}

impl Default for SandwichOptions {
    fn default() -> Self {
        SandwichOptions { z: 3.0, c_min: 1.0 + 1e-6, c_max: 1e12, min_probes: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeMargin {
    pub y: [f64; 3],
    pub p_hat: f64,
    pub se: f64,
    pub q: f64,
    pub reliable: bool,
    /// Smallest constant this probe alone requires.
    pub required_c: Option<f64>,
    /// `ln(p_hat / lower)` and `ln(upper / p_hat)` at the fitted constant.
    pub lower_margin: f64,
    pub upper_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SandwichReport {
    pub t: f64,
    pub shape: EnvelopeShape,
    pub c: Option<f64>,
    pub reliable: usize,
    pub probes: Vec<ProbeMargin>,
    /// Reliable probes that no constant below `c_max` reconciles.
    pub irreconcilable: Vec<usize>,
    pub violated: bool,
}

/// Smallest `c` in `[lo, hi]` with `ok(c)`, for `ok` monotone false-then-true.
fn smallest_satisfying(ok: impl Fn(f64) -> bool, lo: f64, hi: f64) -> Option<f64> {
    if ok(lo) {
        return Some(lo);
    }
    if !ok(hi) {
        return None;
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if ok(m.exp()) {
            b = m;
        } else {
            a = m;
        }
        if b - a < 1e-13 {
            break;
        }
    }
    Some(b.exp())
}

/// Fits the smallest envelope constant for which every reliable probe
/// (`p_hat > 3 SE`) lies between the bounds within `z` standard errors.
pub fn fit_sandwich_constant(
    est: &DensityEstimate,
    t: f64,
    center: &Vector3<f64>,
    shape: EnvelopeShape,
    opts: &SandwichOptions,
) -> Result<SandwichReport> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("envelope time must be positive, got {t}")));
    }
    if shape.marginal != est.marginal {
        return Err(Error::Config("envelope and estimate use different marginals".into()));
    }
    let mut probes = Vec::with_capacity(est.probes.len());
    for (i, y) in est.probes.iter().enumerate() {
        let (p, se) = (est.values[i], est.std_errors[i]);
        let q = shape.quadratic_form(t, &(center - y));
        let reliable = p > 3.0 * se && p > 0.0;
        let required_c = if reliable {
            let (ln_lo, ln_hi) = ((p - opts.z * se).max(f64::MIN_POSITIVE).ln(), (p + opts.z * se).ln());
            let lower_ok = |c: f64| shape.log_bounds(c, t, q).0 <= ln_hi;
            let upper_ok = |c: f64| shape.log_bounds(c, t, q).1 >= ln_lo;
            match (
                smallest_satisfying(lower_ok, opts.c_min, opts.c_max),
                smallest_satisfying(upper_ok, opts.c_min, opts.c_max),
            ) {
                (Some(a), Some(b)) => Some(a.max(b)),
                _ => None,
            }
        } else {
            None
        };
        probes.push(ProbeMargin {
            y: [y[0], y[1], y[2]],
            p_hat: p,
            se,
            q,
            reliable,
            required_c,
            lower_margin: f64::NAN,
            upper_margin: f64::NAN,
        });
    }
    let reliable = probes.iter().filter(|p| p.reliable).count();
    if reliable < opts.min_probes {
        return Err(Error::Insufficient(format!(
            "only {reliable} probes clear the noise floor (need {})",
            opts.min_probes
        )));
    }
    let irreconcilable: Vec<usize> = probes
        .iter()
        .enumerate()
        .filter(|(_, p)| p.reliable && p.required_c.is_none())
        .map(|(i, _)| i)
        .collect();
    let c = irreconcilable
        .is_empty()
        .then(|| probes.iter().filter_map(|p| p.required_c).fold(opts.c_min, f64::max));
    if let Some(c) = c {
        for p in probes.iter_mut().filter(|p| p.p_hat > 0.0) {
            let (lo, hi) = shape.log_bounds(c, t, p.q);
            p.lower_margin = p.p_hat.ln() - lo;
            p.upper_margin = hi - p.p_hat.ln();
        }
    }
    Ok(SandwichReport {
        t,
        shape,
        c,
        reliable,
        probes,
        violated: c.is_none(),
        irreconcilable,
    })
}

/// Checks that one constant serves all horizons: fitted constants may not
/// grow faster than `t^{slope_floor}` as `t` shrinks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniformityReport {
    pub times: Vec<f64>,
    pub constants: Vec<Option<f64>>,
    /// Log-log slope of fitted `C_t` against `t`.
    pub slope: Option<f64>,
    pub slope_floor: f64,
    pub violated: bool,
}

pub fn sandwich_uniformity(reports: &[SandwichReport], slope_floor: f64) -> UniformityReport {
    let times: Vec<f64> = reports.iter().map(|r| r.t).collect();
    let constants: Vec<Option<f64>> = reports.iter().map(|r| r.c).collect();
    let any_violated = reports.iter().any(|r| r.violated);
    let slope = if !any_violated && reports.len() >= 2 {
        let pts: Vec<(f64, f64)> = reports.iter().map(|r| (r.t.ln(), r.c.unwrap_or(f64::NAN).ln())).collect();
        Some(ols_slope(&pts))
    } else {
        None
    };
    let violated = any_violated || slope.is_some_and(|s| s < slope_floor);
    UniformityReport { times, constants, slope, slope_floor, violated }
}

/// Isotropic Gaussian bump of width `eps_width` around `center`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub eps_width: f64,
    pub center: State3,
}

impl MollifierSpec {
    pub fn new(eps_width: f64, center: State3) -> Result<Self> {
        if !(eps_width > 0.0) || !eps_width.is_finite() {
            return Err(Error::Config(format!("eps_width must be positive, got {eps_width}")));
        }
        Ok(MollifierSpec { eps_width, center })
    }

    pub fn ln_eval(&self, y: &Vector3<f64>) -> f64 {
        let e2 = self.eps_width * self.eps_width;
        -1.5 * (2.0 * PI * e2).ln() - (y - self.center.vec()).norm_squared() / (2.0 * e2)
    }
}

pub fn mollifier_eval(spec: &MollifierSpec, y: &State3) -> f64 {
    spec.ln_eval(&y.vec()).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ValueEstimate {
    /// `J_eps = -ln E eta_eps(X)`.
    pub j: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `E eta_eps(X)`, possibly zero after underflow of the linear value.
    pub mean: f64,
    pub n: usize,
    /// Horizon actually simulated.
    pub horizon: f64,
}

/// `J_eps` from given terminal states, with a delta-method 95% interval.
pub fn value_function_from_samples(samples: &[Vector3<f64>], spec: &MollifierSpec) -> Result<ValueEstimate> {
    if samples.len() < 2 {
        return Err(Error::Insufficient("value function needs at least 2 samples".into()));
    }
    let logs: Vec<f64> = samples.iter().map(|x| spec.ln_eval(x)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ratios: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let (m, var) = mean_var(&ratios);
    let ln_mean = top + m.ln();
    if !(ln_mean > f64::MIN_POSITIVE.ln()) {
        return Err(Error::Unreachable { mean: ln_mean.exp() });
    }
    let n = samples.len();
    let se = (var / n as f64).sqrt() / m;
    let j = -ln_mean;
    Ok(ValueEstimate {
        j,
        se,
        ci_low: j - 1.96 * se,
        ci_high: j + 1.96 * se,
        mean: ln_mean.exp(),
        n,
        horizon: f64::NAN,
    })
}

/// Monte Carlo `J_eps(0, x0)`: the ensemble is run to `T - eps_width`
/// (the truncation and mollifier width share one knob).
pub fn value_function_mc<D: Dynamics + Debug>(
    cfg: &SdeConfig<D>,
    spec: &MollifierSpec,
    n: usize,
    base_seed: u64,
) -> Result<ValueEstimate>
where
    D: Clone,
{
    let horizon = cfg.horizon - spec.eps_width;
    if !(horizon > 0.0) {
        return Err(Error::Config(format!(
            "eps_width {} leaves no horizon before T = {}",
            spec.eps_width, cfg.horizon
        )));
    }
    let run = SdeConfig { horizon, step: cfg.step.min(horizon), ..cfg.clone() };
    let ens = simulate_ensemble(&run, n, base_seed, &EnsembleOptions::default())?;
    let mut est = value_function_from_samples(&ens.terminal, spec)?;
    est.horizon = ens.grid.horizon;
    Ok(est)
}
