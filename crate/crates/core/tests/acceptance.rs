//! Acceptance gate: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drivestack::controller::{adjoint_direction, solve_generic, Bounds, ControlProblem, IlqrSettings};
use drivestack::cost::{self, weights_from_params, CostWeights};
use drivestack::diffcheck::{central_difference, relative_error};
use drivestack::gradsuite::{self, GradTarget};
use drivestack::lanegeo::candidate_lanes;
use drivestack::planner::{self, Setting};
use drivestack::scenario::{generate, split, Family, Scenario, ScenarioConfig};
use drivestack::simulator::{self, evaluate_closed_loop, ReplayPolicy, SimConfig};
use drivestack::stack::{self, PlanningProblem, Prediction, StackConfig};
use drivestack::training::{self, evaluate_open_loop, perturb_psi, Checkpoint, LossConfig, TrainConfig, TrainInit, TrainMode};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

const EPOCHS: usize = 20;
const SEEDS: [u64; 3] = [0, 1, 2];

fn scenarios(families: &[Family], count: usize, seed: u64, long: bool, certify: bool) -> Vec<Scenario> {
    let cfg = ScenarioConfig { families: families.to_vec(), count, seed, long, certify, ..Default::default() };
    generate(&cfg).expect("scenario generation").0
}

fn train_run(train_set: &[Scenario], val_set: &[Scenario], mode: TrainMode, seed: u64, bias_offset: f64) -> Checkpoint {
    let cfg = TrainConfig { epochs: EPOCHS, mode, seed, bias_offset, ..Default::default() };
    let loss = LossConfig::new(mode.default_alphas(Setting::Rl), Setting::Rl).unwrap();
    training::train(train_set, val_set, &cfg, &loss, &StackConfig::default(), TrainInit::default(), |_| {}).expect("training").0
}

// 1: gradient suites

fn criterion_1() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for target in GradTarget::ALL {
        let r = gradsuite::run(target, 0, 100).expect("gradient suite");
        pass &= r.passed() && r.checked >= 100;
        parts.push(format!("{} {}/{} max {:.1e}", target.name(), r.checked - r.failed, r.checked, r.max_relative_error));
    }
    Outcome::new(pass, parts.join(", "))
}

// 2: LQR exactness

struct LinearQuadratic {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    h: Vec<DMatrix<f64>>,
    g: Vec<DVector<f64>>,
}

impl LinearQuadratic {
    fn stacked(&self, x: &DVector<f64>, u: Option<&DVector<f64>>) -> DVector<f64> {
        let (nx, nu) = (self.state_dim(), self.control_dim());
        let mut z = DVector::zeros(nx + nu);
        z.rows_mut(0, nx).copy_from(x);
        if let Some(u) = u {
            z.rows_mut(nx, nu).copy_from(u);
        }
        z
    }
}

impl ControlProblem for LinearQuadratic {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
    fn linearize(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }
    fn cost(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        (0..xs.len())
            .map(|t| {
                let z = self.stacked(&xs[t], us.get(t));
                0.5 * (z.transpose() * &self.h[t] * &z)[0] + self.g[t].dot(&z)
            })
            .sum()
    }
    fn quadratize(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        (0..xs.len()).map(|t| (self.h[t].clone(), &self.h[t] * self.stacked(&xs[t], us.get(t)) + &self.g[t])).collect()
    }
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng, floor: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

fn random_lq(rng: &mut ChaCha8Rng, horizon: usize) -> (LinearQuadratic, DVector<f64>) {
    let (nx, nu) = (4, 2);
    let a = DMatrix::identity(nx, nx) + DMatrix::from_fn(nx, nx, |_, _| rng.gen_range(-0.2..0.2));
    let b = DMatrix::from_fn(nx, nu, |_, _| rng.gen_range(-0.5..0.5));
    let mut h = Vec::new();
    let mut g = Vec::new();
    for t in 0..=horizon {
        let mut m = DMatrix::zeros(nx + nu, nx + nu);
        m.view_mut((0, 0), (nx, nx)).copy_from(&random_spd(nx, rng, 0.1));
        if t < horizon {
            m.view_mut((nx, nx), (nu, nu)).copy_from(&random_spd(nu, rng, 0.5));
        }
        h.push(m);
        let mut gv = DVector::from_fn(nx + nu, |_, _| rng.gen_range(-0.3..0.3));
        if t == horizon {
            gv.rows_mut(nx, nu).fill(0.0);
        }
        g.push(gv);
    }
    let x0 = DVector::from_fn(nx, |_, _| rng.gen_range(-1.0..1.0));
    (LinearQuadratic { a, b, h, g }, x0)
}

/// Stacked KKT system of the equality-constrained QP.
fn kkt_solve(p: &LinearQuadratic, x0: &DVector<f64>, horizon: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let (nx, nu) = (p.state_dim(), p.control_dim());
    let nz = (horizon + 1) * nx + horizon * nu;
    let nc = (horizon + 1) * nx;
    let xi = |t: usize| t * nx;
    let ui = |t: usize| (horizon + 1) * nx + t * nu;
    let mut kkt = DMatrix::zeros(nz + nc, nz + nc);
    let mut rhs = DVector::zeros(nz + nc);
    for t in 0..=horizon {
        let h = &p.h[t];
        for i in 0..nx {
            for j in 0..nx {
                kkt[(xi(t) + i, xi(t) + j)] += h[(i, j)];
            }
            rhs[xi(t) + i] = -p.g[t][i];
        }
        if t < horizon {
            for i in 0..nu {
                for j in 0..nu {
                    kkt[(ui(t) + i, ui(t) + j)] += h[(nx + i, nx + j)];
                }
                for j in 0..nx {
                    kkt[(ui(t) + i, xi(t) + j)] += h[(nx + i, j)];
                    kkt[(xi(t) + j, ui(t) + i)] += h[(j, nx + i)];
                }
                rhs[ui(t) + i] = -p.g[t][nx + i];
            }
        }
    }
    for t in 0..=horizon {
        let row = nz + t * nx;
        for i in 0..nx {
            kkt[(row + i, xi(t) + i)] = 1.0;
            kkt[(xi(t) + i, row + i)] = 1.0;
        }
        if t == 0 {
            rhs.rows_mut(row, nx).copy_from(x0);
            continue;
        }
        for i in 0..nx {
            for j in 0..nx {
                kkt[(row + i, xi(t - 1) + j)] = -p.a[(i, j)];
                kkt[(xi(t - 1) + j, row + i)] = -p.a[(i, j)];
            }
            for j in 0..nu {
                kkt[(row + i, ui(t - 1) + j)] = -p.b[(i, j)];
                kkt[(ui(t - 1) + j, row + i)] = -p.b[(i, j)];
            }
        }
    }
    let z = kkt.lu().solve(&rhs).expect("nonsingular KKT system");
    let xs = (0..=horizon).map(|t| z.rows(xi(t), nx).into_owned()).collect();
    let us = (0..horizon).map(|t| z.rows(ui(t), nu).into_owned()).collect();
    (xs, us)
}

fn zero_init(p: &LinearQuadratic, x0: &DVector<f64>, horizon: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let us = vec![DVector::zeros(p.control_dim()); horizon];
    let mut xs = vec![x0.clone()];
    for u in &us {
        let next = p.step(xs.last().unwrap(), u);
        xs.push(next);
    }
    (xs, us)
}

fn criterion_2() -> Outcome {
    const HORIZON: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let settings = IlqrSettings::default();
    let (mut one_iteration, mut worst_solve, mut worst_grad) = (0, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (p, x0) = random_lq(&mut rng, HORIZON);
        let (xs, us) = zero_init(&p, &x0, HORIZON);
        let sol = solve_generic(&p, xs, us, &Bounds::unbounded(2), &settings);
        if sol.converged && sol.iterations == 1 {
            one_iteration += 1;
        }
        let (ox, ou) = kkt_solve(&p, &x0, HORIZON);
        let err = sol.xs.iter().zip(&ox).map(|(a, b)| (a - b).amax()).chain(sol.us.iter().zip(&ou).map(|(a, b)| (a - b).amax())).fold(0.0, f64::max);
        worst_solve = worst_solve.max(err);

        // L = sum_t c_t . z_t; gradient with respect to the linear cost terms.
        let c: Vec<DVector<f64>> = (0..=HORIZON)
            .map(|t| {
                let mut v = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
                if t == HORIZON {
                    v.rows_mut(4, 2).fill(0.0);
                }
                v
            })
            .collect();
        let loss = |xs: &[DVector<f64>], us: &[DVector<f64>]| -> f64 { (0..=HORIZON).map(|t| c[t].dot(&p.stacked(&xs[t], us.get(t)))).sum() };
        let dir = adjoint_direction(&sol.model, &sol.active_set, &c, 4, 2).expect("adjoint solve");
        let coords: Vec<(usize, usize)> = (0..=HORIZON).flat_map(|t| (0..if t < HORIZON { 6 } else { 4 }).map(move |i| (t, i))).collect();
        let base: Vec<f64> = coords.iter().map(|&(t, i)| p.g[t][i]).collect();
        let f = |x: &[f64]| {
            let mut q = LinearQuadratic { a: p.a.clone(), b: p.b.clone(), h: p.h.clone(), g: p.g.clone() };
            for (&(t, i), v) in coords.iter().zip(x) {
                q.g[t][i] = *v;
            }
            let (xs, us) = zero_init(&q, &x0, HORIZON);
            let s = solve_generic(&q, xs, us, &Bounds::unbounded(2), &settings);
            loss(&s.xs, &s.us)
        };
        let fd = central_difference(&f, &base, 1e-5);
        let an: Vec<f64> = coords.iter().map(|&(t, i)| dir[t][i]).collect();
        worst_grad = worst_grad.max(relative_error(&an, &fd));
    }
    Outcome::new(
        one_iteration == 50 && worst_solve < 1e-8 && worst_grad < 1e-4,
        format!("1-iteration {one_iteration}/50, max |solve - KKT| {worst_solve:.1e}, max backward rel err {worst_grad:.1e}"),
    )
}

// 3: planner oracle

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

fn criterion_3() -> Outcome {
    let cfg = StackConfig::default();
    let w = CostWeights::hand_tuned();
    let set = scenarios(&Family::ALL, 100, 3, false, false);
    let (mut argmin_ok, mut softmax_ok, mut count_ok, mut total) = (0, 0, 0, 0);
    for s in &set {
        let problem = PlanningProblem::new(s, &cfg).expect("planning problem");
        let agents = problem.hindsight_agents();
        let ctx = problem.plan_context(&agents, cfg.cost);
        total += 1;
        let lanes = candidate_lanes(&s.lane_graph, &s.goal).len();
        if problem.candidates.len() <= lanes * 8 * 3 {
            count_ok += 1;
        }
        let enumerated: Vec<f64> = problem.candidates.iter().map(|c| cost::evaluate(&c.trajectory, &ctx.cost_ctx(c.lane), &w).unwrap()).collect();
        let best = enumerated.iter().cloned().fold(f64::INFINITY, f64::min);
        let picked = planner::cost_and_select(problem.candidates.clone(), &ctx, &w, 1.0).unwrap();
        if (enumerated[picked.selected] - best).abs() <= 1e-12 * best.abs().max(1.0) {
            argmin_ok += 1;
        }
        let agree = [0.1, 1.0, 10.0].iter().all(|&beta| {
            let set = planner::cost_and_select(problem.candidates.clone(), &ctx, &w, beta).unwrap();
            argmax(&set.probs) == set.selected
        });
        if agree {
            softmax_ok += 1;
        }
    }
    Outcome::new(
        argmin_ok == total && softmax_ok == total && count_ok == total,
        format!("{total} scenarios: argmin {argmin_ok}, softmax argmax {softmax_ok}, count bound {count_ok}"),
    )
}

// 4: monotone iLQR

fn criterion_4() -> Outcome {
    let cfg = StackConfig::default();
    let w = CostWeights::hand_tuned();
    let set = scenarios(&Family::ALL, 500, 4, false, false);
    let (mut solves, mut increases, mut violations) = (0, 0, 0);
    for s in &set {
        let problem = PlanningProblem::new(s, &cfg).expect("planning problem");
        for prediction in [Prediction::GroundTruth, Prediction::Ignore] {
            let agents = problem.agents(&prediction);
            let out = stack::run(&problem, &agents, &w, &cfg).expect("stack");
            let sol = out.control.expect("controller output");
            solves += 1;
            if sol.cost_trace.windows(2).any(|p| p[1] > p[0]) {
                increases += 1;
            }
            if !sol.trajectory.within_limits(&cfg.ilqr.limits) {
                violations += 1;
            }
        }
    }
    Outcome::new(increases == 0 && violations == 0, format!("{} scenarios, {solves} solves: {increases} cost increases, {violations} limit violations", set.len()))
}

// 5 and 6: open-loop training effect

struct OpenLoopData {
    train: Vec<Scenario>,
    eval: Vec<Scenario>,
}

fn interactive_data() -> OpenLoopData {
    let all = scenarios(&Family::INTERACTIVE, 1000, 1, false, true);
    let (train, eval) = split(&all, 0.75, 0);
    OpenLoopData { train, eval }
}

fn criterion_5(data: &OpenLoopData) -> (Outcome, Vec<Checkpoint>) {
    let mut checkpoints = Vec::new();
    for seed in SEEDS {
        for mode in [TrainMode::Standard, TrainMode::Diffstack] {
            checkpoints.push(train_run(&data.train, &data.eval, mode, seed, 0.0));
        }
    }
    let report = evaluate_open_loop(&data.eval, &checkpoints, Setting::Rl, &StackConfig::default()).expect("open-loop evaluation");
    let hc = |run: &str| report.group(run).map(|g| (g.relative[1], g.relative_se[1])).expect("group present");
    let (gt, _) = hc("gt_prediction");
    let (diff, diff_se) = hc("diffstack");
    let (std, std_se) = hc("standard");
    let combined_se = diff_se.hypot(std_se);
    let pass = gt <= diff && diff <= std && std <= 0.0 && std - diff >= combined_se;
    let detail = format!(
        "relative HC: gt {gt:+.4}, diffstack {diff:+.4} (se {diff_se:.4}), standard {std:+.4} (se {std_se:.4}); margin {:.4} vs combined se {combined_se:.4}",
        std - diff
    );
    let diffstack = checkpoints.into_iter().filter(|c| c.mode == TrainMode::Diffstack).collect();
    (Outcome::new(pass, detail), diffstack)
}

fn criterion_6(data: &OpenLoopData) -> Outcome {
    let mut checkpoints = Vec::new();
    for seed in SEEDS {
        for mode in [TrainMode::Standard, TrainMode::Diffstack] {
            checkpoints.push(train_run(&data.train, &data.eval, mode, seed, 1.0));
        }
    }
    let report = evaluate_open_loop(&data.eval, &checkpoints, Setting::Rl, &StackConfig::default()).expect("open-loop evaluation");
    let pl = |run: &str| report.group(run).map(|g| g.relative[0]).expect("group present");
    let (gt, std, diff) = (pl("gt_prediction"), pl("standard-biased"), pl("diffstack-biased"));
    let closed = if std > gt { (std - diff) / (std - gt) } else { f64::NAN };
    let pass = std > 0.0 && diff < 0.0 && closed >= 0.5;
    Outcome::new(pass, format!("relative PL: standard-biased {std:+.4}, diffstack-biased {diff:+.4}, gt {gt:+.4}; gap closed {:.0}%", 100.0 * closed))
}

// 7: cost tuning

fn criterion_7() -> Outcome {
    let all = scenarios(&Family::INTERACTIVE, 400, 2, false, true);
    let (train_set, val_set) = split(&all, 0.75, 0);
    let stack_cfg = StackConfig::default();
    let pre_cfg = TrainConfig { epochs: EPOCHS, ..Default::default() };
    let pre_loss = LossConfig::new([1.0, 0.0, 0.0], Setting::Il).unwrap();
    let (pre, _) = training::train(&train_set, &val_set, &pre_cfg, &pre_loss, &stack_cfg, TrainInit::default(), |_| {}).expect("pretraining");
    let hand = CostWeights::hand_tuned();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut worst_sum = 0.0f64;
    for seed in SEEDS {
        let init = perturb_psi(&hand, 0.5, seed).unwrap();
        let cfg = TrainConfig { epochs: EPOCHS, seed, mode: TrainMode::CostTuning, ..Default::default() };
        let loss = LossConfig::new(TrainMode::CostTuning.default_alphas(Setting::Il), Setting::Il).unwrap();
        let psi1 = init.psi()[0];
        let c_norm = init.c_norm();
        let mut psi1_fixed = true;
        let (ck, report) = training::train(&train_set, &val_set, &cfg, &loss, &stack_cfg, TrainInit { predictor: Some(pre.predictor.clone()), weights: init }, |e| {
            let w = weights_from_params(e.psi, e.alpha, c_norm).unwrap().weights();
            worst_sum = worst_sum.max((w.iter().sum::<f64>() / e.alpha - c_norm).abs());
            psi1_fixed &= e.psi[0] == psi1;
        })
        .expect("cost tuning");
        let w = ck.weights.weights();
        worst_sum = worst_sum.max((w.iter().sum::<f64>() / ck.weights.alpha() - c_norm).abs());
        let first = report.epochs.first().unwrap().val.mse;
        let last = report.epochs.last().unwrap().val.mse;
        pass &= last < first && psi1_fixed;
        parts.push(format!("seed {seed}: MSE {first:.4} -> {last:.4}"));
    }
    pass &= worst_sum <= 1e-10;
    Outcome::new(pass, format!("{}; max |sum w / alpha - c| {worst_sum:.1e}", parts.join(", ")))
}

// 8: closed loop

fn criterion_8(diffstack: &[Checkpoint]) -> Outcome {
    let long = scenarios(&Family::INTERACTIVE, 120, 3, true, true);
    let sim = SimConfig::default();
    let w = CostWeights::hand_tuned();
    let mut max_deviation = 0.0f64;
    for s in &long {
        let r = simulator::simulate(s, &mut ReplayPolicy { log: s }, &sim).expect("replay");
        max_deviation = max_deviation.max(simulator::closed_loop_metrics(&r, s, &w).deviation);
    }
    let report = evaluate_closed_loop(&long, diffstack, &StackConfig::default(), &sim).expect("closed-loop evaluation");
    let decomposition = report.records.iter().all(|r| r.metrics.trajectory_cost == r.metrics.collision_cost + r.metrics.lane_cost + r.metrics.control_effort);
    let tc = |run: &str| report.group(run).map(|g| g.mean[0]).expect("group present");
    let (none, gt, diff) = (tc("no_prediction"), tc("gt_prediction"), tc("diffstack"));
    let pass = max_deviation == 0.0 && decomposition && gt <= diff && diff <= none;
    Outcome::new(
        pass,
        format!(
            "replay deviation {max_deviation}, decomposition exact {decomposition}; trajectory cost gt {gt:.4}, diffstack {diff:.4}, no-prediction {none:.4} ({} scenarios)",
            long.len() - report.skipped.len()
        ),
    )
}

// 9: CLI determinism

fn cli(dir: &Path, args: &[&str]) -> bool {
    let status = Command::new(env!("CARGO_BIN_EXE_drivestack")).arg("--out-dir").arg(dir).args(args).output().expect("launch cli");
    status.status.success()
}

fn cli_pipeline(dir: &Path) -> bool {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    [
        vec!["gen-data", "--count", "24", "--seed", "5", "--out", "train.json"],
        vec!["gen-data", "--count", "12", "--seed", "6", "--out", "test.json"],
        vec!["gen-data", "--count", "4", "--seed", "7", "--long", "--out", "long.json"],
        vec!["train", "--data", &p("train.json"), "--mode", "standard", "--setting", "rl", "--alphas", "1,0,0", "--epochs", "2", "--seed", "1", "--out", "std.json"],
        vec!["train", "--data", &p("train.json"), "--mode", "diffstack", "--epochs", "2", "--seed", "1", "--bias-offset", "1.0", "--out", "ds.json"],
        vec!["eval-open-loop", "--data", &p("test.json"), "--checkpoints", &p("std.json"), &p("ds.json"), "--out", "open_loop.csv"],
        vec!["eval-closed-loop", "--data", &p("long.json"), "--checkpoints", &p("ds.json"), "--tsim", "10", "--replan", "0.5", "--out", "closed_loop.csv"],
        vec!["grad-check", "--target", "planner", "--seed", "3", "--instances", "10", "--out", "grad.json"],
        vec!["plot", "--metrics-csv", &p("open_loop.csv"), "--out", "open_loop.svg"],
    ]
    .iter()
    .all(|args| cli(dir, args))
}

fn criterion_9() -> Outcome {
    let root = tempfile::tempdir().expect("temp dir");
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    if !cli_pipeline(&a) || !cli_pipeline(&b) {
        return Outcome::new(false, "a CLI command failed");
    }
    let outputs = ["open_loop.csv", "open_loop.runs.csv", "closed_loop.csv", "std.log.csv", "ds.log.csv", "std.json", "ds.json", "grad.json", "open_loop.svg"];
    let differing: Vec<&str> = outputs.iter().copied().filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok()).collect();
    let detail = if differing.is_empty() { format!("{} outputs byte-identical across two runs", outputs.len()) } else { format!("differing: {}", differing.join(", ")) };
    Outcome::new(differing.is_empty(), detail)
}

fn main() {
    let mut results = Vec::new();
    let mut record = |n: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = run();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} [{name}]: {verdict} ({:.1}s) {}", start.elapsed().as_secs_f64(), outcome.detail);
        results.push(outcome.pass);
    };
    record(1, "gradient suites", &mut criterion_1);
    record(2, "LQR exactness", &mut criterion_2);
    record(3, "planner oracle", &mut criterion_3);
    record(4, "monotone iLQR", &mut criterion_4);
    let data = interactive_data();
    let mut diffstack = Vec::new();
    record(5, "end-to-end training effect", &mut || {
        let (outcome, checkpoints) = criterion_5(&data);
        diffstack = checkpoints;
        outcome
    });
    record(6, "bias correction", &mut || criterion_6(&data));
    record(7, "cost tuning", &mut criterion_7);
    record(8, "closed loop", &mut || criterion_8(&diffstack));
    record(9, "CLI determinism", &mut criterion_9);
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
