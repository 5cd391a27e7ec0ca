use detpol::analytic::analytic_q;
use detpol::env::{simulate, BehaviorModel, Dataset, DeterministicPolicy, EnvConfig, Trajectory};
use detpol::kernel::{KernelFamily, ScaledKernel};
use detpol::models::{ActionValue, NuisanceMode};
use detpol::nuisance::{
    fit_behavior, fit_dq, fit_dw, fit_q, fit_w, BehaviorSpec, NuisanceConfig, NuisanceProvider, NuisanceSet,
};
use detpol::sieve::SieveModel;

const RIDGE: f64 = 1e-6;

fn behavior() -> BehaviorModel {
    BehaviorModel::linear(0.8, 1.0).unwrap()
}

fn grid() -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for s in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        for a in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            out.push((s, a));
        }
    }
    out
}

#[test]
fn fitted_last_step_q_matches_analytic() {
    let env = EnvConfig::standard(5);
    let pol = DeterministicPolicy::linear(1.0);
    let data = simulate(&env, &behavior(), 2000, 1).unwrap();
    let q = fit_q(&data, &pol, NuisanceMode::Deterministic, None, 2, RIDGE * 2000.0).unwrap();
    let exact = analytic_q(&env, &pol, 4).unwrap();
    let c = &q[4].coef;
    // sieve order: 1, s, a, s^2, s a, a^2
    let fitted = [c[0], c[1], c[2], c[3], c[5], c[4]];
    for (k, (f, e)) in fitted.iter().zip(exact.coef).enumerate() {
        assert!((f - e).abs() < 0.1, "coefficient {k}: {f} vs {e}");
    }
}

#[test]
fn narrow_kernel_approaches_deterministic_fit() {
    let env = EnvConfig::standard(5);
    let pol = DeterministicPolicy::linear(0.9);
    let data = simulate(&env, &behavior(), 2000, 2).unwrap();
    let k = ScaledKernel::gaussian(0.01).unwrap();
    let qk = fit_q(&data, &pol, NuisanceMode::Kernel, Some(&k), 2, RIDGE).unwrap();
    let qd = fit_q(&data, &pol, NuisanceMode::Deterministic, None, 2, RIDGE).unwrap();
    for t in 0..5 {
        for s in [-1.0, 0.0, 1.0] {
            let tau = pol.action(s);
            assert!((qk[t].value(s, tau) - qd[t].value(s, tau)).abs() < 0.05);
        }
    }
}

#[test]
fn fitted_dq_matches_finite_difference_of_fitted_q() {
    let env = EnvConfig::standard(2);
    let data = simulate(&env, &behavior(), 5000, 3).unwrap();
    let theta = 0.8;
    let delta = 1e-2;
    let ridge = RIDGE * 5000.0;
    let k = ScaledKernel::gaussian(0.3).unwrap();
    for (mode, kernel) in [(NuisanceMode::Deterministic, None), (NuisanceMode::Kernel, Some(&k))] {
        let fq = |th: f64| fit_q(&data, &DeterministicPolicy::linear(th), mode, kernel, 2, ridge).unwrap();
        let q = fq(theta);
        let dq = fit_dq(&data, &q, &DeterministicPolicy::linear(theta), mode, kernel, 2, ridge).unwrap();
        let (up, down) = (fq(theta + delta), fq(theta - delta));
        for (s, a) in grid() {
            let fd = (up[0].value(s, a) - down[0].value(s, a)) / (2.0 * delta);
            assert!((dq[0][0].value(s, a) - fd).abs() < 0.1, "{mode:?} at ({s},{a})");
        }
        // no downstream term at the last step
        assert!(dq[1][0].coef.iter().all(|&c| c == 0.0));
    }
}

#[test]
fn single_step_dq_is_zero() {
    let env = EnvConfig::bandit(0.3);
    let pol = DeterministicPolicy::linear(0.8);
    let data = simulate(&env, &behavior(), 200, 4).unwrap();
    let q = fit_q(&data, &pol, NuisanceMode::Deterministic, None, 2, RIDGE).unwrap();
    let dq = fit_dq(&data, &q, &pol, NuisanceMode::Deterministic, None, 2, RIDGE).unwrap();
    assert!(dq[0][0].coef.iter().all(|&c| c == 0.0));
}

#[test]
fn constant_rewards_give_zero_dq() {
    let trajs = (0..300)
        .map(|i| {
            let x = i as f64;
            let s = [(x * 0.37).sin(), (x * 0.11).cos(), (x * 0.53).sin()];
            let a = [(x * 1.31).cos(), (x * 0.71).sin(), (x * 2.17).cos()];
            Trajectory::new(s.to_vec(), a.to_vec(), vec![2.0; 3]).unwrap()
        })
        .collect();
    let data = Dataset::new(trajs, 0, "constant").unwrap();
    let pol = DeterministicPolicy::linear(0.7);
    let q = fit_q(&data, &pol, NuisanceMode::Deterministic, None, 2, 1e-8).unwrap();
    let dq = fit_dq(&data, &q, &pol, NuisanceMode::Deterministic, None, 2, 1e-8).unwrap();
    for (s, a) in grid() {
        for d in &dq {
            assert!(d[0].value(s, a).abs() < 1e-4, "{:?}", d[0].coef);
        }
    }
}

/// Behavior equal to the gaussian-kernel smoothing of the evaluation policy.
fn on_policy_behavior(theta: f64, h: f64) -> BehaviorModel {
    BehaviorModel::linear(theta, h / 2f64.sqrt()).unwrap()
}

#[test]
fn on_policy_ratios_are_one() {
    let (theta, h) = (0.9, 0.5);
    let b = on_policy_behavior(theta, h);
    let env = EnvConfig::standard(3);
    let data = simulate(&env, &b, 2000, 5).unwrap();
    let pol = DeterministicPolicy::linear(theta);
    let k = ScaledKernel::gaussian(h).unwrap();
    let w = fit_w(&data, &pol, &k, &b, 2, RIDGE).unwrap();
    assert_eq!(w[0], SieveModel::constant(w[0].sieve.clone(), 1.0));
    for wj in &w[1..] {
        assert!((wj.coef[0] - 1.0).abs() < 0.05);
        assert!(wj.coef[1..].iter().all(|c| c.abs() < 0.05));
    }
}

#[test]
fn on_policy_ratio_gradient_targets_have_zero_mean() {
    let (theta, h) = (0.9, 0.5);
    let b = on_policy_behavior(theta, h);
    let env = EnvConfig::standard(3);
    let data = simulate(&env, &b, 5000, 6).unwrap();
    let pol = DeterministicPolicy::linear(theta);
    let k = ScaledKernel::gaussian(h).unwrap();
    let dw = fit_dw(&data, &pol, &k, &b, 2, RIDGE).unwrap();
    assert!(dw[0][0].coef.iter().all(|&c| c == 0.0));
    // least squares with an intercept reproduces the target mean
    for (j, d) in dw.iter().enumerate().skip(1) {
        let mean: f64 = data.trajectories.iter().map(|t| d[0].eval_state(t.states[j])).sum::<f64>() / 5000.0;
        assert!(mean.abs() < 0.05, "step {j}: {mean}");
    }
}

#[test]
fn on_policy_ratio_gradients_vanish_at_the_optimum() {
    // at theta = 1 the next-state law is stationary in theta, so the true
    // ratio gradient is zero; the score variance grows like 1/h^2
    let h = 1.0;
    let b = on_policy_behavior(1.0, h);
    let env = EnvConfig::bandit(0.3).with_horizon(2);
    let data = simulate(&env, &b, 5000, 6).unwrap();
    let pol = DeterministicPolicy::linear(1.0);
    let k = ScaledKernel::gaussian(h).unwrap();
    let dw = fit_dw(&data, &pol, &k, &b, 2, RIDGE).unwrap();
    for s in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        assert!(dw[1][0].eval_state(s).abs() < 0.1, "dw at {s}: {:?}", dw[1][0].coef);
    }
}

#[test]
fn ratios_self_normalize_under_behavior() {
    let env = EnvConfig::standard(3);
    let data = simulate(&env, &behavior(), 5000, 7).unwrap();
    let pol = DeterministicPolicy::linear(1.0);
    let k = ScaledKernel::gaussian(0.5).unwrap();
    let w = fit_w(&data, &pol, &k, &behavior(), 2, RIDGE * 5000.0).unwrap();
    for (j, wj) in w.iter().enumerate() {
        let mean: f64 = data.trajectories.iter().map(|t| wj.eval_state(t.states[j])).sum::<f64>() / 5000.0;
        assert!((mean - 1.0).abs() < 0.1, "step {j}: {mean}");
    }
}

#[test]
fn fitted_dw_matches_finite_difference_of_fitted_w() {
    let env = EnvConfig::standard(2);
    let data = simulate(&env, &behavior(), 5000, 8).unwrap();
    let k = ScaledKernel::gaussian(0.5).unwrap();
    let (theta, delta) = (0.9, 1e-2);
    let fw = |th: f64| fit_w(&data, &DeterministicPolicy::linear(th), &k, &behavior(), 2, RIDGE).unwrap();
    let dw = fit_dw(&data, &DeterministicPolicy::linear(theta), &k, &behavior(), 2, RIDGE).unwrap();
    let (up, down) = (fw(theta + delta), fw(theta - delta));
    for s in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let fd = (up[1].eval_state(s) - down[1].eval_state(s)) / (2.0 * delta);
        assert!((dw[1][0].eval_state(s) - fd).abs() < 0.15, "at {s}");
    }
}

#[test]
fn behavior_fit_recovers_the_logging_policy() {
    let data = simulate(&EnvConfig::standard(5), &behavior(), 2000, 9).unwrap();
    let b = fit_behavior(&data, 1, 1e-8).unwrap();
    assert!((b.mean_coeff() - 0.8).abs() < 0.05);
    assert!((b.std - 1.0).abs() < 0.05);
    assert!(!b.known);
    let mass = detpol::quadrature::integrate(|a| b.density(0.5, a), -20.0, 20.0, 1e-12).value;
    assert!((mass - 1.0).abs() < 1e-6);
}

#[test]
fn behavior_fit_on_one_state_is_the_sample_mean() {
    let actions = [0.3, -0.1, 0.8, 0.4];
    let trajs = actions
        .iter()
        .map(|&a| Trajectory::new(vec![0.5], vec![a], vec![0.0]).unwrap())
        .collect();
    let data = Dataset::new(trajs, 0, "single").unwrap();
    let b = fit_behavior(&data, 1, 1e-8).unwrap();
    let mean = actions.iter().sum::<f64>() / 4.0;
    assert!((b.mean_at(0.5) - mean).abs() < 1e-6);
}

#[test]
fn kernel_smoothing_of_fitted_q_matches_quadrature() {
    let env = EnvConfig::standard(3);
    let pol = DeterministicPolicy::linear(0.9);
    let data = simulate(&env, &behavior(), 500, 10).unwrap();
    for family in KernelFamily::ALL {
        let k = ScaledKernel::new(family, 0.3).unwrap();
        let q = fit_q(&data, &pol, NuisanceMode::Kernel, Some(&k), 3, RIDGE).unwrap();
        for m in &q {
            for s in [-1.0, 0.0, 0.7, 2.0] {
                let tau = pol.action(s);
                let quad = k.integrate(|a| m.value(s, a), tau);
                assert!((m.smooth(s, tau, &k) - quad).abs() < 1e-6);
                let quad1 = k.integrate_d1(|a| m.value(s, a), tau);
                assert!((m.smooth_d1(s, tau, &k) - quad1).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn smoothing_gap_shrinks_with_bandwidth() {
    let env = EnvConfig::standard(3);
    let pol = DeterministicPolicy::linear(0.9);
    let data = simulate(&env, &behavior(), 2000, 11).unwrap();
    let mut gaps = Vec::new();
    for h in [0.5, 0.25, 0.1, 0.05] {
        let k = ScaledKernel::gaussian(h).unwrap();
        let q = fit_q(&data, &pol, NuisanceMode::Kernel, Some(&k), 2, RIDGE).unwrap();
        let mut worst: f64 = 0.0;
        for m in &q {
            for i in 0..=20 {
                let s = -2.0 + 0.2 * i as f64;
                let tau = pol.action(s);
                worst = worst.max((m.smooth(s, tau, &k) - m.value(s, tau)).abs());
            }
        }
        gaps.push(worst);
    }
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "{gaps:?}");
}

#[test]
fn every_trajectory_is_scored_out_of_fold() {
    let env = EnvConfig::standard(3);
    let pol = DeterministicPolicy::linear(0.9);
    let data = simulate(&env, &behavior(), 101, 12).unwrap();
    let k = ScaledKernel::gaussian(0.25).unwrap();
    let set = NuisanceSet::fit(
        &data,
        &pol,
        NuisanceMode::Kernel,
        &k,
        &BehaviorSpec::Fitted { degree: 1 },
        &NuisanceConfig::default(),
        13,
    )
    .unwrap();
    assert_eq!(set.split[0].len(), 51);
    set.check_cross_fit(data.len()).unwrap();
    for i in 0..data.len() {
        let trained = set.for_trajectory(i).training_indices().unwrap();
        assert!(!trained.contains(&i));
        assert_eq!(trained.len() + set.split[set.fold_of(i)].len(), 101);
    }
}
