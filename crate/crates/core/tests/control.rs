use nalgebra::{Matrix3, Vector3};
use opioid_lab::control::{
    action_linear, closed_loop_linear, linearize_and_gramian, minimize_action, minimum_energy_control, optimal_feedback_linear,
    ActionSolver,
};
use opioid_lab::flow::integrate_flow;
use opioid_lab::linalg::psd_eigen;
use opioid_lab::model::{DiffusionSpec, LinearDrift, ModelParams, State3};
use opioid_lab::sde::SdeConfig;
use opioid_lab::stats::ols_slope;

fn unit() -> DiffusionSpec {
    DiffusionSpec::constant(1.0).unwrap()
}

fn chain_closed_form(t: f64) -> Matrix3<f64> {
    Matrix3::new(
        t,
        t.powi(2) / 2.0,
        t.powi(3) / 6.0,
        t.powi(2) / 2.0,
        t.powi(3) / 3.0,
        t.powi(4) / 8.0,
        t.powi(3) / 6.0,
        t.powi(4) / 8.0,
        t.powi(5) / 20.0,
    )
}

/// `(W^{-1})_{33}` of the unit-horizon chain Gramian in integer arithmetic:
/// `120 W` is integral, so `(W^{-1})_{33} = 120 adj(120 W)_{33} / det(120 W)`.
fn chain_inverse_33() -> f64 {
    let m: [[i64; 3]; 3] = [[120, 60, 20], [60, 40, 15], [20, 15, 6]];
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let adj33 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    (120 * adj33) as f64 / det as f64
}

#[test]
fn chain_gramian_matches_polynomial_integrals() {
    let g = linearize_and_gramian(&LinearDrift::chain_of_integrators(), &unit(), &State3::new(0.0, 0.0, 0.0), 1.0, 1e-3)
        .unwrap();
    let exact = chain_closed_form(1.0);
    for i in 0..3 {
        for j in 0..3 {
            let rel = (g.matrix[(i, j)] - exact[(i, j)]).abs() / exact[(i, j)];
            assert!(rel < 1e-8, "W{}{}: {rel:e}", i + 1, j + 1);
        }
    }
    assert_eq!(chain_inverse_33(), 720.0);
}

#[test]
fn chain_eigenvalues_follow_odd_powers() {
    let times: Vec<f64> = (0..6).map(|i| 1e-3 * 10f64.powf(i as f64 / 5.0)).collect();
    let mut logs = [vec![], vec![], vec![]];
    for t in &times {
        let g = linearize_and_gramian(&LinearDrift::chain_of_integrators(), &unit(), &State3::new(0.0, 0.0, 0.0), *t, t / 1000.0)
            .unwrap();
        let e = psd_eigen(&g.matrix);
        for k in 0..3 {
            logs[k].push((t.ln(), e.values[k].ln()));
        }
    }
    for (k, expected) in [(0, 5.0), (1, 3.0), (2, 1.0)] {
        let slope = ols_slope(&logs[k]);
        assert!((slope - expected).abs() <= 0.05 * expected, "eigenvalue {k}: slope {slope}");
    }
}

#[test]
fn chain_action_matches_exact_inverse() {
    let g = linearize_and_gramian(&LinearDrift::chain_of_integrators(), &unit(), &State3::new(0.0, 0.0, 0.0), 1.0, 1e-3)
        .unwrap();
    let end = State3::from(g.flow_end());
    let y0 = State3::new(0.0, 0.0, -1.0);
    let a = action_linear(&g, &end, &y0).unwrap();
    assert!((a - 0.5 * chain_inverse_33()).abs() < 1e-6 * a, "{a}");
}

#[test]
fn shooting_matches_linear_minimum_energy() {
    let hook = LinearDrift::chain_of_integrators();
    let x0 = State3::new(0.1, 0.0, 0.0);
    let g = linearize_and_gramian(&hook, &unit(), &x0, 1.0, 1e-3).unwrap();
    let end = State3::from(g.flow_end());
    let y0 = State3::new(end.x1 - 0.2, end.x2 + 0.1, end.x3 + 0.05);
    let exact = action_linear(&g, &end, &y0).unwrap();
    let r = minimize_action(&hook, &x0, &y0, 1.0, 64, &ActionSolver::default()).unwrap();
    assert!(r.converged, "gap {}", r.endpoint_gap);
    assert!((r.value - exact).abs() <= 0.01 * exact, "{} vs {exact}", r.value);
}

#[test]
fn action_shrinks_toward_flow_endpoint() {
    let p = ModelParams::reference();
    let x0 = State3::new(0.6, 0.1, 0.05);
    let g = linearize_and_gramian(&p, &unit(), &x0, 1.0, 1e-3).unwrap();
    let end = integrate_flow(&p, &x0, 1.0, 1e-3).unwrap().terminal().vec();
    // a displacement along W keeps the linearized action at 1/2 c^T W c
    let far = end + g.matrix * Vector3::new(-1.0, 1.0, 1.0);
    let mut values = Vec::new();
    for k in 0..5 {
        let s = 1.0 - k as f64 / 5.0;
        let y = State3::from(end + s * (far - end));
        values.push(minimize_action(&p, &x0, &y, 1.0, 32, &ActionSolver::default()).unwrap().value);
    }
    assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
}

#[test]
fn feedback_reproduces_open_loop_and_its_cost() {
    let hook = LinearDrift::chain_of_integrators();
    let x0 = State3::new(0.0, 0.0, 0.0);
    let h = 1e-3;
    let g = linearize_and_gramian(&hook, &unit(), &x0, 1.0, h).unwrap();
    let y0 = State3::new(0.3, 0.2, 0.1);
    let open = minimum_energy_control(&g, &y0).unwrap();

    // Open-loop optimum in closed form: Phi(1, s) B = (1, 1 - s, (1 - s)^2 / 2).
    let lambda = g.matrix.try_inverse().unwrap() * (y0.vec() - g.flow_end());
    let u_of = |s: f64| {
        let tau = 1.0 - s;
        lambda[0] + lambda[1] * tau + lambda[2] * tau * tau / 2.0
    };
    assert!((open[0] - u_of(0.0)).abs() < 1e-9 && (open[500] - u_of(0.5)).abs() < 1e-9);

    // Along the optimal trajectory the feedback equals the open-loop value.
    let mut x = x0.vec();
    for k in 0..900 {
        let t = g.flow.grid.time(k);
        let u = optimal_feedback_linear(&g, t, &State3::from(x), &y0, 0.05).unwrap();
        assert!((u - open[k]).abs() < 1e-6, "t = {t}: {u} vs {}", open[k]);
        x = rk4_forced(&hook, &x, t, h, &u_of);
    }

    // Closed-loop noiseless run accumulates the minimum energy.
    let fine = 1e-4;
    let g = linearize_and_gramian(&hook, &unit(), &x0, 1.0, fine).unwrap();
    let quiet = DiffusionSpec::constant(0.0).unwrap();
    let cfg = SdeConfig::new(hook, quiet, x0, 1.0, fine);
    let run = closed_loop_linear(&cfg, &g, &y0, 0.002, 0).unwrap();
    let cost = run.cost;
    let last = *run.states.last().unwrap();
    let exact = action_linear(&g, &State3::from(g.flow_end()), &y0).unwrap();
    assert!((cost - exact).abs() <= 0.01 * exact, "{cost} vs {exact}");
    assert!((last - y0.vec()).norm() < 1e-2);
}

fn rk4_forced(hook: &LinearDrift, x: &Vector3<f64>, t: f64, h: f64, u: &dyn Fn(f64) -> f64) -> Vector3<f64> {
    let b = Vector3::x();
    let f = |x: &Vector3<f64>, s: f64| hook.a * x + b * u(s);
    let k1 = f(x, t);
    let k2 = f(&(x + 0.5 * h * k1), t + 0.5 * h);
    let k3 = f(&(x + 0.5 * h * k2), t + 0.5 * h);
    let k4 = f(&(x + h * k3), t + h);
    x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}
