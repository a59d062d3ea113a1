//! One test per top-level acceptance criterion. Each prints a single
//! `PASS`/`FAIL` line with the measured numbers before asserting.
//!
//! Run with `cargo test -p influence-core --test acceptance -- --nocapture`
//! to see every line.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use influence_core::demo::{generate_demos, Corpus, Demonstration, RobotRandomization};
use influence_core::envs::EnvSpec;
use influence_core::human::{HumanSpec, LearnerKind, SolvedModel};
use influence_core::inference::{loss_and_grad, mle_loss, theta_mse, split_indices, train, EpochLog, FeatureNorm, LearnerNet, TrainConfig};
use influence_core::lq::*;
use influence_core::nn::NetConfig;
use influence_core::planner::{evaluate, EpisodeResult, EpisodeRun, PlannerConfig, Strategy};
use influence_core::service::{run_scripted, Bias, Condition, ScriptedClient, Session, Teaching};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DEMOS: usize = 50;
const EPOCHS: usize = 50;
const EPISODES: usize = 20;
const SESSION_SEEDS: u64 = 10;

/// Per-step planner used for closed-loop criteria. Smaller than the
/// library default so the suite fits a single-core budget.
fn planner() -> PlannerConfig {
    PlannerConfig { horizon: 6, samples: 32, elites: 8, iterations: 3, rollouts: 2, ..PlannerConfig::default() }
}

fn report(name: &str, ok: bool, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn env_problem(env: &EnvSpec) -> LqProblem {
    SolvedModel::from_vec(env, &env.theta_star).unwrap().prob
}

// ---------------------------------------------------------------- DARE

#[test]
fn dare_correctness() {
    let t0 = Instant::now();
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let scalar = solve_dare(&LqProblem::scalar(1.0, 1.0, 1.0, 1.0), 1e-12, 10_000).unwrap();
    let golden_err = (scalar.p[(0, 0)] - golden).abs();
    let mut residuals = Vec::new();
    for env in [EnvSpec::lander(), EnvSpec::arm()] {
        let prob = env_problem(&env);
        let sol = solve_dare(&prob, 1e-12, 10_000).unwrap();
        residuals.push((env.kind.name(), dare_residual(&prob, &sol.p)));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let ok = golden_err <= 1e-9 && residuals.iter().all(|(_, r)| *r <= 1e-10) && elapsed < 1.0;
    report("dare_correctness", ok, format!("golden-ratio error {golden_err:.2e}, residuals {residuals:?}, {elapsed:.3} s"));
    assert!(ok);
}

// ---------------------------------------------------------------- policy density

fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn policy_is_a_proper_density() {
    // m = 1: the lander.
    let lander = env_problem(&EnvSpec::lander());
    let sol1 = solve_dare(&lander, 1e-12, 10_000).unwrap();
    let x1 = DVector::from_vec(vec![0.4, -0.2]);
    let pol1 = GaussianPolicy::new(&x1, &lander, &sol1).unwrap();
    let c = pol1.mean[0];
    let mass1 = simpson(|u| pol1.log_prob(&DVector::from_element(1, u)).exp(), c - 40.0, c + 40.0, 200_000);

    // m = 2: the planar arm.
    let arm = env_problem(&EnvSpec::by_name("arm-planar").unwrap());
    let sol2 = solve_dare(&arm, 1e-12, 10_000).unwrap();
    let x2 = DVector::from_vec(vec![0.3, -0.4]);
    let pol2 = GaussianPolicy::new(&x2, &arm, &sol2).unwrap();
    let sd = pol2.covariance().diagonal().map(f64::sqrt);
    let (c0, c1) = (pol2.mean[0], pol2.mean[1]);
    let inner = |u0: f64| simpson(|u1| pol2.log_prob(&DVector::from_vec(vec![u0, u1])).exp(), c1 - 12.0 * sd[1], c1 + 12.0 * sd[1], 1200);
    let mass2 = simpson(inner, c0 - 12.0 * sd[0], c0 + 12.0 * sd[0], 1200);

    // Moments at 10^5 samples against u* = -Kx and (2(R + BᵀPB))⁻¹.
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let samples: Vec<DVector<f64>> = (0..n).map(|_| pol2.sample(&mut rng)).collect();
    let mean = samples.iter().fold(DVector::zeros(2), |a, s| a + s) / n as f64;
    let cov = samples.iter().fold(DMatrix::zeros(2, 2), |a, s| a + (s - &mean) * (s - &mean).transpose()) / (n - 1) as f64;
    let u_star = -(&sol2.k * &x2);
    let h = &arm.r + arm.b.transpose() * &sol2.p * &arm.b;
    let want_cov = (h * 2.0).try_inverse().unwrap();
    let mean_rel = (&mean - &u_star).norm() / u_star.norm();
    let cov_rel = (&cov - &want_cov).norm() / want_cov.norm();

    let ok = (mass1 - 1.0).abs() <= 1e-6 && (mass2 - 1.0).abs() <= 1e-4 && mean_rel <= 0.05 && cov_rel <= 0.05;
    report(
        "policy_is_a_proper_density",
        ok,
        format!("mass m=1 {mass1:.9}, m=2 {mass2:.7}; sample mean rel. error {mean_rel:.4}, covariance rel. error {cov_rel:.4}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- gradients

fn jacobian_rel_error(prob: &LqProblem) -> f64 {
    let solve = |p: &LqProblem| solve_dare(p, 1e-14, 100_000).unwrap();
    let sol = solve(prob);
    let jac = dare_jacobians(prob, &sol).unwrap();
    let (n, m) = (prob.state_dim(), prob.action_dim());
    let (mut worst, mut scale) = (0.0f64, 1e-12f64);
    for role in [ThetaRole::A, ThetaRole::B, ThetaRole::Q, ThetaRole::R] {
        for e in role.entries(n, m).unwrap() {
            let d = LqPerturbation::entry(n, m, e);
            let h = 1e-6;
            let fd = (solve(&d.apply(prob, h)).p - solve(&d.apply(prob, -h)).p) / (2.0 * h);
            scale = scale.max(fd.abs().max());
            worst = worst.max((jac.contract(&d) - fd).abs().max());
        }
    }
    worst / scale
}

fn policy_grad_rel_error(prob: &LqProblem, rng: &mut ChaCha8Rng) -> f64 {
    let roles = [ThetaRole::A, ThetaRole::B, ThetaRole::Q, ThetaRole::R];
    let (n, m) = (prob.state_dim(), prob.action_dim());
    let sol = solve_dare(prob, 1e-14, 100_000).unwrap();
    let jac = dare_jacobians(prob, &sol).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let u = GaussianPolicy::new(&x, prob, &sol).unwrap().sample(rng);
        let g = policy_grad_theta(&u, &x, &roles, prob, &sol, &jac).unwrap();
        let lp = |p: &LqProblem| policy_log_prob(&u, &x, p, &solve_dare(p, 1e-14, 100_000).unwrap()).unwrap();
        let fd: Vec<f64> = roles
            .iter()
            .flat_map(|r| r.entries(n, m).unwrap())
            .map(|e| {
                let d = LqPerturbation::entry(n, m, e);
                (lp(&d.apply(prob, 1e-6)) - lp(&d.apply(prob, -1e-6))) / 2e-6
            })
            .collect();
        let scale = fd.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        worst = worst.max(g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
    }
    worst
}

fn net_backward_rel_error() -> f64 {
    let env = EnvSpec::lander();
    let human = HumanSpec::default_for(&env);
    let demos = generate_demos(&env, &human, RobotRandomization { sigma: env.robot_sigma }, 2, 8, 1).unwrap();
    let refs: Vec<&Demonstration> = demos.iter().collect();
    let cfg = NetConfig { d_model: 8, heads: 2, layers: 1, d_ff: 16, enc_hidden: 8, ..NetConfig::default() };
    let net = LearnerNet::new(&env, cfg, FeatureNorm::fit(&refs, 5), 0);
    let (_, g) = loss_and_grad(&net, &refs);
    let grad = g.to_flat();
    let params = net.net.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let i = rng.random_range(0..params.len());
        let at = |h: f64| {
            let mut p = params.clone();
            p[i] += h;
            let mut n = net.clone();
            n.net.set_flat(&p);
            mle_loss(&n, &refs).nll
        };
        let fd = (at(1e-5) - at(-1e-5)) / 2e-5;
        worst = worst.max((grad[i] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

#[test]
fn gradient_suite() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lander = env_problem(&EnvSpec::lander());
    let arm = env_problem(&EnvSpec::arm());
    let jac = jacobian_rel_error(&lander).max(jacobian_rel_error(&arm));
    let pol = policy_grad_rel_error(&lander, &mut rng).max(policy_grad_rel_error(&arm, &mut rng));
    let net = net_backward_rel_error();
    let elapsed = t0.elapsed().as_secs_f64();
    let ok = jac <= 1e-5 && pol <= 1e-4 && net <= 1e-3 && elapsed < 120.0;
    report("gradient_suite", ok, format!("Jacobians {jac:.2e}, policy gradient {pol:.2e}, network backward {net:.2e}, {elapsed:.1} s"));
    assert!(ok);
}

// ---------------------------------------------------------------- shared training

struct Trained {
    corpus: Corpus,
    net: LearnerNet,
    logs: Vec<EpochLog>,
    seconds: f64,
}

fn corpus_for(env: &EnvSpec, human: HumanSpec, seed: u64) -> Corpus {
    let robot = RobotRandomization { sigma: env.robot_sigma };
    let demos = generate_demos(env, &human, robot, DEMOS, env.horizon, seed).unwrap();
    Corpus { env: env.clone(), human, seed, robot, config_hash: String::new(), demos }
}

type Slot = Arc<OnceLock<Arc<Trained>>>;

/// Networks are trained once per (env, learner) and shared between tests.
fn trained(env_name: &str, kind: LearnerKind) -> Arc<Trained> {
    static CACHE: OnceLock<Mutex<HashMap<(String, LearnerKind), Slot>>> = OnceLock::new();
    let slot = CACHE.get_or_init(Default::default).lock().unwrap().entry((env_name.to_string(), kind)).or_default().clone();
    slot.get_or_init(|| {
        let env = EnvSpec::by_name(env_name).unwrap();
        let corpus = corpus_for(&env, HumanSpec::for_env(&env, kind), 1);
        let t0 = Instant::now();
        let (net, logs) = train(&corpus, &TrainConfig { epochs: EPOCHS, ..TrainConfig::default() }).unwrap();
        Arc::new(Trained { corpus, net, logs, seconds: t0.elapsed().as_secs_f64() })
    })
    .clone()
}

// ---------------------------------------------------------------- inference

#[test]
fn inference_reproduction() {
    let mut ok = true;
    let mut details = Vec::new();
    for env in ["lander", "arm"] {
        for kind in [LearnerKind::Gradient, LearnerKind::Threshold] {
            let t = trained(env, kind);
            let steps = t.logs.len() - 1;
            let decreasing = t.logs.windows(2).filter(|w| w[1].nll < w[0].nll).count();
            let frac = decreasing as f64 / steps as f64;
            let (_, val) = split_indices(t.corpus.demos.len(), TrainConfig::default().val_split, 0);
            let held: Vec<&Demonstration> = val.iter().map(|&i| &t.corpus.demos[i]).collect();
            let initial = t.logs[0].theta_mse.unwrap();
            let fin = theta_mse(&t.net, &held).unwrap();
            let ratio = fin / initial;
            let this = frac >= 0.8 && ratio < 0.5 && t.seconds < 30.0 * 60.0;
            ok &= this;
            details.push(format!(
                "{env}/{}: nll fell on {decreasing}/{steps} epochs, θ-MSE {initial:.4} -> {fin:.4} ({:.0}%), {:.0} s",
                kind.name(),
                100.0 * ratio,
                t.seconds
            ));
        }
    }
    report("inference_reproduction", ok, details.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------- influence ordering

fn quarter_means(r: &EpisodeResult) -> (f64, f64) {
    let e: Vec<f64> = r.metrics.iter().map(|m| m.effort).collect();
    let q = (e.len() / 4).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&e[..q]), mean(&e[e.len() - q..]))
}

/// Mean early- and late-quarter effort over the runs of one strategy.
fn effort_profile(runs: &[EpisodeRun], s: Strategy) -> (f64, f64) {
    let sel: Vec<(f64, f64)> = runs.iter().filter(|r| r.strategy == s).map(|r| quarter_means(&r.result)).collect();
    let k = sel.len() as f64;
    (sel.iter().map(|p| p.0).sum::<f64>() / k, sel.iter().map(|p| p.1).sum::<f64>() / k)
}

fn mean_final_error(runs: &[EpisodeRun], s: Strategy) -> f64 {
    let sel: Vec<f64> = runs.iter().filter(|r| r.strategy == s).map(|r| r.result.final_theta_err()).collect();
    sel.iter().sum::<f64>() / sel.len() as f64
}

fn closed_loop(env_name: &str, kind: LearnerKind, strategies: &[Strategy]) -> Vec<EpisodeRun> {
    let env = EnvSpec::by_name(env_name).unwrap();
    let human = HumanSpec::for_env(&env, kind);
    let net = strategies.contains(&Strategy::Active).then(|| trained(env_name, kind));
    evaluate(&env, &human, strategies, &planner(), net.as_ref().map(|t| &t.net), EPISODES, env.horizon, 2024).unwrap()
}

#[test]
fn influence_ordering() {
    let all = [Strategy::Oracle, Strategy::Active, Strategy::Passive, Strategy::Random];
    let mut checks: Vec<(String, bool)> = Vec::new();
    for env in ["lander", "arm"] {
        let runs = closed_loop(env, LearnerKind::Gradient, &all);
        let [o, a, p, r] = all.map(|s| mean_final_error(&runs, s));
        checks.push((format!("{env} Oracle {o:.3} <= Active {a:.3}"), o <= a));
        checks.push((format!("{env} Active {a:.3} < Passive {p:.3}"), a < p));
        checks.push((format!("{env} Active {a:.3} < Random {r:.3}"), a < r));
        checks.push((format!("{env} Oracle/Active within 25% ({:.0}% apart)", 100.0 * (a - o).abs() / o.max(a)), (a - o).abs() <= 0.25 * o.max(a)));
        for s in [Strategy::Oracle, Strategy::Active] {
            let (early, late) = effort_profile(&runs, s);
            checks.push((format!("{env} {} effort decays {early:.3} -> {late:.3}", s.name()), late < 0.2 * early));
        }
    }
    let runs = closed_loop("arm", LearnerKind::Threshold, &[Strategy::Oracle, Strategy::Active]);
    for s in [Strategy::Oracle, Strategy::Active] {
        let (early, late) = effort_profile(&runs, s);
        checks.push((format!("arm/threshold {} effort persists {early:.3} -> {late:.3}", s.name()), late >= 0.2 * early));
    }
    let ok = checks.iter().all(|c| c.1);
    let detail: Vec<String> = checks.iter().map(|(d, pass)| format!("{}{d}", if *pass { "" } else { "[x] " })).collect();
    report("influence_ordering", ok, detail.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------- assist ordering

#[test]
fn assist_ordering() {
    let strategies = [Strategy::Active, Strategy::Static, Strategy::Oracle];
    let mut checks: Vec<(String, bool)> = Vec::new();
    for env_name in ["goal", "pref"] {
        let env = EnvSpec::by_name(env_name).unwrap();
        let human = HumanSpec::default_for(&env);
        let net = trained(env_name, human.kind);
        let runs = evaluate(&env, &human, &strategies, &planner(), Some(&net.net), EPISODES, env.horizon, 2024).unwrap();
        let cost = |s: Strategy| {
            let v: Vec<f64> = runs.iter().filter(|r| r.strategy == s).map(|r| r.result.total_task_cost()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let [learning, fixed, oracle] = strategies.map(cost);
        checks.push((format!("{env_name} learning-assist cost {learning:.2} < static {fixed:.2} (oracle {oracle:.2})"), learning < fixed));
        let (early, late) = effort_profile(&runs, Strategy::Static);
        checks.push((format!("{env_name} static effort {early:.3} -> {late:.3}"), late < 0.2 * early));
    }
    let ok = checks.iter().all(|c| c.1);
    let detail: Vec<String> = checks.iter().map(|(d, pass)| format!("{}{d}", if *pass { "" } else { "[x] " })).collect();
    report("assist_ordering", ok, detail.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------- headless session

#[test]
fn headless_demo_session() {
    let bias = Bias::X;
    let net = Arc::new(trained("arm-planar", LearnerKind::Gradient).net.clone());
    let ticks = bias.env().horizon;
    let q = ticks / 4;
    let mut final_quarter = [0.0; 2];
    let mut no_teach_effort = Vec::new();
    let mut early_active_max = 0.0f64;
    let mut completed = true;
    for seed in 0..SESSION_SEEDS {
        for (i, strategy) in [Teaching::NoTeaching, Teaching::ActiveTeaching].into_iter().enumerate() {
            let mut session = Session::new(seed, Condition { strategy, bias }, Some(net.clone()), planner(), seed).unwrap();
            let mut client = ScriptedClient::imperfect(bias.env(), seed).unwrap();
            let summary = run_scripted(&mut session, &mut client, ticks).unwrap();
            completed &= summary.series.len() == ticks;
            let opt = &summary.action_optimality_series;
            final_quarter[i] += opt[ticks - q..].iter().sum::<f64>() / q as f64;
            let effort: Vec<f64> = summary.series.iter().map(|r| r.u.iter().zip(&r.u_h).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()).collect();
            match strategy {
                Teaching::NoTeaching => no_teach_effort.extend(effort),
                Teaching::ActiveTeaching => early_active_max = early_active_max.max(effort[..q].iter().copied().fold(0.0, f64::max)),
            }
        }
    }
    let k = SESSION_SEEDS as f64;
    let (none, active) = (final_quarter[0] / k, final_quarter[1] / k);
    let baseline = no_teach_effort.iter().sum::<f64>() / no_teach_effort.len() as f64;
    let exaggerates = early_active_max > 2.0 * baseline;
    let ok = completed && exaggerates && active < none;
    report(
        "headless_demo_session",
        ok,
        format!(
            "{SESSION_SEEDS} seeds x {ticks} ticks; largest early |u - u_H| {early_active_max:.3} vs no-teaching mean {baseline:.3}; \
             final-quarter action optimality active {active:.4} vs none {none:.4}"
        ),
    );
    assert!(ok);
}
