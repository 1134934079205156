use nalgebra::Vector3;
use opioid_lab::exit::{
    boundary_functional_mc, exit_probability_mc, exit_probability_strided, monitoring_bias,
    regularization_convergence, smoothed_indicator, DomainBox,
};
use opioid_lab::model::{DiffusionSpec, ModelParams, State3};
use opioid_lab::sde::{RegularizationNoise, SdeConfig};
use opioid_lab::stats::ols_slope;

/// `P{ sup_{t <= T} |W_t| >= b }` from the alternating image series.
fn two_sided_exit(b: f64, t: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let stay: f64 = (0..50)
        .map(|k| {
            let m = (2 * k + 1) as f64;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign / m * (-m * m * pi * pi * t / (8.0 * b * b)).exp()
        })
        .sum::<f64>()
        * 4.0
        / pi;
    1.0 - stay
}

fn brownian(horizon: f64, h: f64) -> SdeConfig<ModelParams> {
    SdeConfig::new(ModelParams::zero(), DiffusionSpec::constant(1.0).unwrap(), State3::new(0.0, 0.0, 0.0), horizon, h)
}

fn slab(b: f64) -> DomainBox {
    DomainBox::slab_x1(&State3::new(0.0, 0.0, 0.0), b, 10.0).unwrap()
}

#[test]
fn series_oracle_limits() {
    // short horizon: two one-sided tails; long horizon: almost sure exit
    let t: f64 = 0.05;
    let one_sided = 2.0 * 2.0 * (1.0 - opioid_lab::stats::normal_cdf(1.0 / t.sqrt()));
    assert!((two_sided_exit(1.0, t) - one_sided).abs() < 1e-6);
    assert!(two_sided_exit(1.0, 20.0) > 0.999);
}

#[test]
fn brownian_slab_matches_series_after_bias_removal() {
    let cfg = brownian(1.0, 1e-3);
    let m = monitoring_bias(&cfg, &slab(1.0), 40_000, 11).unwrap();
    let reference = two_sided_exit(1.0, 1.0);
    assert!(m.bias < 0.0 && m.fine.q_hat < reference, "{m:?} vs {reference}");
    assert!(
        (m.extrapolated - reference).abs() <= 3.0 * m.extrapolated_se + 0.005,
        "extrapolated {} +- {} vs {reference}",
        m.extrapolated,
        m.extrapolated_se
    );
}

#[test]
fn monitoring_bias_scales_like_sqrt_h() {
    // fine grid re-checked every s nodes; consecutive-stride differences
    // q(s) - q(2s) grow like sqrt(s h)
    let cfg = brownian(0.25, 1e-4);
    let strides = [1usize, 2, 4, 8, 16];
    let est = exit_probability_strided(&cfg, &slab(0.5), 40_000, 5, &strides).unwrap();
    let points: Vec<(f64, f64)> = (0..4)
        .map(|j| ((strides[j] as f64 * 1e-4).ln(), (est[j].q_hat - est[j + 1].q_hat).ln()))
        .collect();
    let slope = ols_slope(&points);
    assert!((slope - 0.5).abs() < 0.15, "slope {slope}");
}

#[test]
fn exit_probability_is_monotone_in_horizon_and_domain() {
    let d = slab(1.0);
    let q: Vec<f64> = [0.25, 0.5, 1.0]
        .iter()
        .map(|&t| exit_probability_mc(&brownian(t, 1e-3), &d, 5_000, 21).unwrap().q_hat)
        .collect();
    assert!(q[0] <= q[1] && q[1] <= q[2], "{q:?}");

    let inner = slab(0.8);
    assert!(d.contains_box(&inner));
    let cfg = brownian(0.5, 1e-3);
    let small = exit_probability_mc(&cfg, &inner, 5_000, 21).unwrap();
    let big = exit_probability_mc(&cfg, &d, 5_000, 21).unwrap();
    assert!(small.q_hat >= big.q_hat);
    assert!(small.ci_low <= small.q_hat && small.q_hat <= small.ci_high);
}

#[test]
fn sharp_boundary_functional_recovers_exit_probability() {
    let cfg = brownian(1.0, 1e-3);
    let d = slab(1.0);
    let n = 20_000;
    let q = exit_probability_mc(&cfg, &d, n, 8).unwrap();
    let psi = smoothed_indicator(1000, &d).unwrap();
    let v = boundary_functional_mc(&cfg, &d, &psi, n, 8).unwrap();
    assert!((v.mean - q.q_hat).abs() < 2.0 / (n as f64).sqrt(), "{} vs {}", v.mean, q.q_hat);
    // coarse collar counts near-boundary survivors too
    let blunt = boundary_functional_mc(&cfg, &d, &smoothed_indicator(2, &d).unwrap(), n, 8).unwrap();
    assert!(blunt.mean > v.mean);
}

#[test]
fn regularization_irrelevant_for_slab_exit() {
    let cfg = brownian(1.0, 1e-3).regularized(0.0, RegularizationNoise::Independent);
    let t = regularization_convergence(&cfg, &slab(1.0), 4_000, 2, &[1e-2, 1e-3, 0.0]).unwrap();
    for r in &t.rows {
        assert!(r.difference.abs() <= 2.0 * r.combined_se + 1e-15, "{r:?}");
    }
    assert!(t.converged);
}

#[test]
fn coupled_distance_scales_like_sqrt_eps() {
    let p = ModelParams::reference();
    let cfg = SdeConfig::new(p, DiffusionSpec::constant(0.1).unwrap(), State3::new(0.6, 0.1, 0.05), 1.0, 1e-3);
    let d = DomainBox::new(State3::new(-5.0, -5.0, -5.0), State3::new(5.0, 5.0, 5.0)).unwrap();
    let eps = [1e-2, 1e-3, 1e-4, 1e-5, 0.0];
    let t = regularization_convergence(&cfg, &d, 500, 4, &eps).unwrap();
    let points: Vec<(f64, f64)> = t.rows[..4].iter().map(|r| (r.eps.ln(), r.mean_sup_distance.ln())).collect();
    let slope = ols_slope(&points);
    assert!((slope - 0.5).abs() < 0.05, "slope {slope}");
    assert_eq!(t.rows[4].mean_sup_distance, 0.0);
}

#[test]
fn exit_state_sits_on_the_hit_face() {
    let cfg = brownian(2.0, 1e-3);
    let d = slab(0.3);
    let psi = |_: f64, x: &Vector3<f64>| if d.signed_distance(x).abs() < 1e-12 { 1.0 } else { 0.0 };
    let on_face = boundary_functional_mc(&cfg, &d, &psi, 2_000, 3).unwrap();
    let q = exit_probability_mc(&cfg, &d, 2_000, 3).unwrap();
    assert_eq!(on_face.mean, q.q_hat);
}
