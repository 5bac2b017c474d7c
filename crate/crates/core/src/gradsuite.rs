//! Randomized finite-difference suites for every differentiable stage of
//! the stack.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{self, IlqrConfig};
use crate::cost::{self, weights_from_params, AgentFuture, CostContext, CostWeights, Vec6, NUM_TERMS};
use crate::diffcheck::{self, GradCheckReport, DEFAULT_STEP, MAX_SAMPLED_COORDS};
use crate::dynamics::{self, Control, ControlLimits, State, Trajectory};
use crate::error::{Error, Result};
use crate::lanegeo::Lane;
use crate::planner::{self, Candidate, Setting};
use crate::predictor::{self, AgentHistory, PredictorParams, PredictorShape};
use crate::scenario::{generate, Family, ScenarioConfig};
use crate::stack::{self, Prediction, StackConfig};
use crate::training::{total_loss_and_grads, LossConfig, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    Dynamics,
    Cost,
    Planner,
    Predictor,
    Controller,
    EndToEnd,
}

impl GradTarget {
    pub const ALL: [GradTarget; 6] =
        [GradTarget::Dynamics, GradTarget::Cost, GradTarget::Planner, GradTarget::Predictor, GradTarget::Controller, GradTarget::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Dynamics => "dynamics",
            GradTarget::Cost => "cost",
            GradTarget::Planner => "planner",
            GradTarget::Predictor => "predictor",
            GradTarget::Controller => "controller",
            GradTarget::EndToEnd => "end_to_end",
        }
    }

    /// Relative-error tolerance of the suite.
    pub fn tolerance(self) -> f64 {
        match self {
            GradTarget::EndToEnd => 1e-3,
            _ => 1e-5,
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        GradTarget::ALL
            .into_iter()
            .find(|t| t.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown grad-check target '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub target: GradTarget,
    pub seed: u64,
    pub tolerance: f64,
    /// Instances compared against finite differences.
    pub checked: usize,
    pub failed: usize,
    /// Instances without a usable comparison: unconverged solves, or a
    /// discrete choice flipping inside the difference stencil.
    pub skipped: usize,
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
    /// Report of the instance with the largest error.
    pub worst: Option<GradCheckReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failed == 0
    }
}

struct Tally {
    errors: Vec<f64>,
    failed: usize,
    skipped: usize,
    worst: Option<GradCheckReport>,
}

impl Tally {
    fn new() -> Self {
        Tally { errors: Vec::new(), failed: 0, skipped: 0, worst: None }
    }

    fn record(&mut self, r: GradCheckReport) {
        if r.non_finite > 0 {
            self.skipped += 1;
            return;
        }
        if !r.passed {
            self.failed += 1;
        }
        self.errors.push(r.relative_error);
        if self.worst.as_ref().is_none_or(|w| r.relative_error > w.relative_error) {
            self.worst = Some(r);
        }
    }

    fn finish(self, target: GradTarget, seed: u64) -> SuiteReport {
        let n = self.errors.len();
        SuiteReport {
            target,
            seed,
            tolerance: target.tolerance(),
            checked: n,
            failed: self.failed,
            skipped: self.skipped,
            max_relative_error: self.errors.iter().cloned().fold(0.0, f64::max),
            mean_relative_error: if n == 0 { 0.0 } else { self.errors.iter().sum::<f64>() / n as f64 },
            worst: self.worst,
        }
    }
}

/// Draws per wanted instance before a suite gives up on skipped ones.
const MAX_ATTEMPT_FACTOR: usize = 10;

/// Finite-difference gradients below this norm are dominated by rounding.
const MIN_SENSITIVITY: f64 = 1e-6;

/// Runs `instances` randomized checks of `target`; suites that can skip
/// draw further instances until that many are compared.
pub fn run(target: GradTarget, seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    match target {
        GradTarget::Dynamics => (0..instances).for_each(|_| tally.record(dynamics_instance(&mut rng))),
        GradTarget::Cost => {
            for _ in 0..instances {
                tally.record(cost_instance(&mut rng)?);
            }
        }
        GradTarget::Planner => (0..instances).for_each(|_| tally.record(planner_instance(&mut rng))),
        GradTarget::Predictor => {
            for i in 0..instances {
                tally.record(predictor_instance(&mut rng, i as u64)?);
            }
        }
        GradTarget::Controller => {
            for _ in 0..instances * MAX_ATTEMPT_FACTOR {
                if tally.errors.len() == instances {
                    break;
                }
                match controller_instance(&mut rng)? {
                    Some(r) => tally.record(r),
                    None => tally.skipped += 1,
                }
            }
        }
        GradTarget::EndToEnd => end_to_end(&mut tally, seed, instances)?,
    }
    Ok(tally.finish(target, seed))
}

/// Combines several reports of one instance; the worst error decides.
fn merge(parts: Vec<GradCheckReport>) -> GradCheckReport {
    let mut worst = parts.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error)).cloned().expect("at least one part");
    worst.non_finite = parts.iter().map(|p| p.non_finite).sum();
    worst.passed = parts.iter().all(|p| p.passed);
    worst.coords = parts.into_iter().flat_map(|p| p.coords).collect();
    worst
}

fn dynamics_instance(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let s = State::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.0..20.0));
    let u = Control::new(rng.gen_range(-1.0..1.0), rng.gen_range(-4.0..3.0));
    let dt = rng.gen_range(0.05..1.0);
    let x0: Vec<f64> = s.to_array().into_iter().chain(u.to_array()).collect();
    let (a, b) = dynamics::jacobians(&s, &u, dt).expect("finite inputs");
    let tol = GradTarget::Dynamics.tolerance();
    let parts = (0..4)
        .map(|row| {
            // heading is wrapped; difference the unwrapped update instead
            let f = move |x: &[f64]| {
                let s = State::new(x[0], x[1], x[2], x[3]);
                let n = dynamics::step(&s, &Control::new(x[4], x[5]), dt).expect("finite inputs");
                if row == 2 { x[2] + x[4] * dt } else { n.to_array()[row] }
            };
            let g: Vec<f64> = (0..4).map(|j| a[(row, j)]).chain((0..2).map(|j| b[(row, j)])).collect();
            diffcheck::check(f, move |_| g.clone(), &x0, 1e-6, tol, None)
        })
        .collect();
    merge(parts)
}

fn random_lane(rng: &mut ChaCha8Rng) -> Lane {
    let heading = rng.gen_range(-0.2..0.2);
    Lane::straight("lane", [-30.0, rng.gen_range(-1.0..1.0)], heading, 120.0, 2.0).expect("valid lane")
}

fn random_scene(rng: &mut ChaCha8Rng, horizon: usize) -> (Trajectory, Vec<AgentFuture>, State) {
    let s0 = State::new(0.0, rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3), rng.gen_range(2.0..8.0));
    let controls: Vec<Control> = (0..horizon).map(|_| Control::new(rng.gen_range(-0.5..0.5), rng.gen_range(-2.0..2.0))).collect();
    let traj = dynamics::rollout(&s0, &controls, 0.5).expect("finite rollout");
    let k = rng.gen_range(1..4);
    let modes: Vec<Vec<[f64; 2]>> = (0..k)
        .map(|_| {
            (1..=horizon)
                .map(|t| {
                    let p = traj.states[t].pos();
                    [p[0] + rng.gen_range(-3.0..3.0), p[1] + rng.gen_range(-3.0..3.0)]
                })
                .collect()
        })
        .collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
    let z: f64 = raw.iter().sum();
    let logged = (1..=horizon).map(|t| [traj.states[t].x + rng.gen_range(1.0..4.0), traj.states[t].y - 1.0]).collect();
    let agents = vec![AgentFuture::predicted(modes, raw.iter().map(|p| p / z).collect()), AgentFuture::logged(logged)];
    let goal = State::new(traj.terminal().x + rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0), 0.0, rng.gen_range(2.0..8.0));
    (traj, agents, goal)
}

fn random_weights(rng: &mut ChaCha8Rng) -> CostWeights {
    let psi: [f64; NUM_TERMS] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    weights_from_params(psi, rng.gen_range(0.5..2.0), 7.1).expect("finite params")
}

fn flatten(traj: &Trajectory) -> Vec<f64> {
    (0..=traj.horizon())
        .flat_map(|t| {
            let u = traj.controls.get(t).map_or([0.0; 2], Control::to_array);
            traj.states[t].to_array().into_iter().chain(u)
        })
        .collect()
}

fn unflatten(v: &[f64], dt: f64, horizon: usize) -> Trajectory {
    let states = (0..=horizon).map(|t| State::from_array([v[6 * t], v[6 * t + 1], v[6 * t + 2], v[6 * t + 3]])).collect();
    let controls = (0..horizon).map(|t| Control::new(v[6 * t + 4], v[6 * t + 5])).collect();
    Trajectory { states, controls, dt }
}

fn flatten_future(a: &AgentFuture) -> Vec<f64> {
    a.modes.iter().flatten().flat_map(|p| *p).chain(a.probs.iter().cloned()).collect()
}

fn unflatten_future(template: &AgentFuture, x: &[f64]) -> AgentFuture {
    let t = template.horizon();
    let k = template.modes.len();
    let modes = (0..k).map(|m| (0..t).map(|j| [x[2 * (m * t + j)], x[2 * (m * t + j) + 1]]).collect()).collect();
    AgentFuture::predicted(modes, x[2 * k * t..].to_vec())
}

fn flatten_pred_grads(g: &cost::PredictionGrads) -> Vec<f64> {
    g.means.iter().flatten().flat_map(|p| *p).chain(g.probs.iter().cloned()).collect()
}

/// State/control, weight-parameter and prediction gradients of the cost.
fn cost_instance(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let horizon = 6;
    let (traj, agents, goal) = random_scene(rng, horizon);
    let lane = random_lane(rng);
    let w = random_weights(rng);
    let ctx = CostContext::new(&agents, goal, &lane);
    let tol = GradTarget::Cost.tolerance();

    let x0 = flatten(&traj);
    let g_tau: Vec<f64> = cost::stage_gradients(&traj, &ctx, &w)?.iter().flat_map(|v| v.iter().cloned().collect::<Vec<_>>()).collect();
    let f_tau = |x: &[f64]| cost::evaluate(&unflatten(x, traj.dt, horizon), &ctx, &w).unwrap_or(f64::NAN);
    let r_tau = diffcheck::check(f_tau, |_| g_tau.clone(), &x0, 1e-6, tol, None);

    let (dpsi, dalpha) = cost::grad_params(&traj, &ctx, &w)?;
    let p0: Vec<f64> = w.psi().into_iter().chain([w.alpha()]).collect();
    let g_p: Vec<f64> = dpsi.into_iter().chain([dalpha]).collect();
    let f_p = |x: &[f64]| {
        let w = weights_from_params(std::array::from_fn(|i| x[i]), x[NUM_TERMS], w.c_norm()).expect("finite params");
        cost::evaluate(&traj, &ctx, &w).unwrap_or(f64::NAN)
    };
    let r_p = diffcheck::check(f_p, |_| g_p.clone(), &p0, 1e-6, tol, None);

    let g_pred = flatten_pred_grads(&cost::grad_predictions(&traj, &ctx, &w)?[0]);
    let a0 = flatten_future(&agents[0]);
    let f_pred = |x: &[f64]| {
        let ag = vec![unflatten_future(&agents[0], x), agents[1].clone()];
        cost::evaluate(&traj, &CostContext::new(&ag, goal, &lane), &w).unwrap_or(f64::NAN)
    };
    let r_pred = diffcheck::check(f_pred, |_| g_pred.clone(), &a0, 1e-6, tol, None);
    Ok(merge(vec![r_tau, r_p, r_pred]))
}

fn planner_instance(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let n = rng.gen_range(2..40);
    let costs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
    let beta = rng.gen_range(0.1..3.0);
    let target = rng.gen_range(0..n);
    let traj = dynamics::rollout(&State::default(), &[Control::default(); 3], 0.5).expect("finite rollout");
    let unit = CostWeights::from_weights([1.0; NUM_TERMS]).expect("positive weights");
    let set_of = |c: &[f64]| {
        let cands = vec![Candidate { trajectory: traj.clone(), lane: 0, accel: 0.0, offset: 0.0 }; c.len()];
        planner::complete(cands, c.iter().map(|&v| [0.0, 0.0, 0.0, 0.0, v]).collect(), &unit, beta)
    };
    let (_, g) = planner::planning_loss(&set_of(&costs), target).expect("valid target");
    let f = |c: &[f64]| planner::planning_loss(&set_of(c), target).map_or(f64::NAN, |l| l.0);
    diffcheck::check(f, |_| g.clone(), &costs, DEFAULT_STEP, GradTarget::Planner.tolerance(), None)
}

fn predictor_instance(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let history = rng.gen_range(2..8);
    let horizon = rng.gen_range(2..7);
    let modes = rng.gen_range(1..4);
    let mk = |rng: &mut ChaCha8Rng, id: &str, is_ego: bool| {
        let s0 = State::new(rng.gen_range(-10.0..10.0), rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0), rng.gen_range(2.0..10.0));
        let u: Vec<Control> = (0..history - 1).map(|_| Control::new(rng.gen_range(-0.2..0.2), rng.gen_range(-1.0..1.0))).collect();
        let states = if u.is_empty() { vec![s0] } else { dynamics::rollout(&s0, &u, 0.5).expect("finite rollout").states };
        AgentHistory { id: id.into(), states, is_ego }
    };
    let hist = vec![mk(rng, "ego", true), mk(rng, "agent", false)];
    let shape = PredictorShape { modes, hidden: 8, history, horizon };
    let mut params = PredictorParams::zeros(shape)?;
    params.theta.iter_mut().for_each(|x| *x = rng.gen_range(-0.4..0.4));
    let pred = predictor::predict(&hist, 1, &params, 0.5)?;
    let gt: Vec<[f64; 2]> = pred.mode_positions()[0].iter().map(|q| [q[0] + rng.gen_range(-2.0..2.0), q[1] + rng.gen_range(-2.0..2.0)]).collect();
    // NLL plus a random linear functional of positions and probabilities
    let wpos: Vec<f64> = (0..modes * horizon * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wprob: Vec<f64> = (0..modes).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |theta: &[f64]| {
        let q = PredictorParams { shape, theta: theta.to_vec() };
        let Ok(pr) = predictor::predict(&hist, 1, &q, 0.5) else { return f64::NAN };
        let lin: f64 = pr.mode_positions().iter().flatten().enumerate().map(|(i, p)| wpos[2 * i] * p[0] + wpos[2 * i + 1] * p[1]).sum();
        predictor::nll(&pr, &gt).unwrap_or(f64::NAN) + lin + pr.probs.iter().zip(&wprob).map(|(a, b)| a * b).sum::<f64>()
    };
    let (_, mut up) = predictor::nll_with_grad(&pred, &gt)?;
    for k in 0..modes {
        for t in 0..horizon {
            up.positions[k][t][0] += wpos[2 * (k * horizon + t)];
            up.positions[k][t][1] += wpos[2 * (k * horizon + t) + 1];
        }
        up.probs[k] += wprob[k];
    }
    let mut g = vec![0.0; params.theta.len()];
    predictor::accumulate_grads(&pred, &params, &up, &mut g)?;
    let coords = diffcheck::sample_coords(params.theta.len(), MAX_SAMPLED_COORDS, seed);
    Ok(diffcheck::check(loss, |_| g.clone(), &params.theta, DEFAULT_STEP, GradTarget::Predictor.tolerance(), Some(&coords)))
}

/// `controller::backward` against differences of the final LQR map, in the
/// cost parameters and the predicted agent's outputs.
fn controller_instance(rng: &mut ChaCha8Rng) -> Result<Option<GradCheckReport>> {
    let horizon = 6;
    let (init, agents, goal) = random_scene(rng, horizon);
    let limits = ControlLimits::default();
    let init = dynamics::rollout(init.initial(), &init.controls.iter().map(|u| limits.clamp(u)).collect::<Vec<_>>(), init.dt)?;
    let lane = random_lane(rng);
    let w = random_weights(rng);
    let ctx = CostContext::new(&agents, goal, &lane);
    let cfg = tight_ilqr();
    let sol = controller::solve(&init, &ctx, &w, &cfg)?;
    if !usable(&sol, &ctx, &w, &cfg.limits) {
        return Ok(None);
    }
    let dl: Vec<Vec6> = (0..=horizon).map(|t| Vec6::from_fn(|i, _| if t < horizon || i < 4 { rng.gen_range(-1.0..1.0) } else { 0.0 })).collect();
    let g = controller::backward(&sol, &ctx, &w, &dl)?;
    let expansion = sol.trajectory.clone();
    let loss_of = |ctx: &CostContext, w: &CostWeights| {
        controller::final_lqr_map(&expansion, ctx, w, &cfg.limits).map_or(f64::NAN, |z| z.iter().zip(&dl).map(|(a, b)| a.dot(b)).sum())
    };
    let tol = GradTarget::Controller.tolerance();
    let p0: Vec<f64> = w.psi().into_iter().chain([w.alpha()]).collect();
    let g_p: Vec<f64> = g.dpsi.into_iter().chain([g.dalpha]).collect();
    let f_p = |x: &[f64]| loss_of(&ctx, &weights_from_params(std::array::from_fn(|i| x[i]), x[NUM_TERMS], w.c_norm()).expect("finite params"));
    let r_p = diffcheck::check(f_p, |_| g_p.clone(), &p0, 1e-5, tol, None);
    let a0 = flatten_future(&agents[0]);
    let g_pred = flatten_pred_grads(&g.predictions[0]);
    let f_pred = |x: &[f64]| {
        let ag = vec![unflatten_future(&agents[0], x), agents[1].clone()];
        loss_of(&CostContext::new(&ag, goal, &lane), &w)
    };
    let r_pred = diffcheck::check(f_pred, |_| g_pred.clone(), &a0, 1e-5, tol, None);
    Ok(Some(merge(vec![r_p, r_pred])))
}

/// Solver settings that iterate to a fixed point, so the last LQR
/// approximation is taken at the solution itself.
fn tight_ilqr() -> IlqrConfig {
    let mut cfg = IlqrConfig::default();
    cfg.settings.max_iters = 100;
    cfg.settings.conv_threshold = 1e-10;
    cfg
}

/// Hindsight-cost gradient in the predictor parameters through planner and
/// controller, on generated interactive scenarios. The controller output is
/// differentiated through the solution of its last LQR approximation, so the
/// reference holds the converged expansion fixed and re-solves that
/// approximation under perturbed predictions.
fn end_to_end(tally: &mut Tally, seed: u64, instances: usize) -> Result<()> {
    let count = instances * MAX_ATTEMPT_FACTOR;
    let scen_cfg = ScenarioConfig { families: Family::INTERACTIVE.to_vec(), count, seed, certify: false, ..Default::default() };
    let (scenarios, _) = generate(&scen_cfg)?;
    let cfg = StackConfig { ilqr: tight_ilqr(), ..Default::default() };
    let loss = LossConfig { alpha1: 0.0, alpha2: 0.0, alpha3: 1.0, setting: Setting::Rl };
    let w = CostWeights::hand_tuned();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (i, s) in scenarios.iter().enumerate() {
        if tally.errors.len() == instances {
            break;
        }
        let sample = Sample::new(s, &cfg, [0.0; 2])?;
        let shape = PredictorShape::new(crate::training::DEFAULT_MODES, s.past_steps + 1, s.horizon_steps);
        let mut params = PredictorParams::init(shape, seed + i as u64)?;
        params.theta.iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05));
        let (losses, grads) = total_loss_and_grads(&sample, &params, &w, &loss, &cfg, 1.0)?;
        let problem = &sample.problem;
        let pred = predictor::predict(&sample.histories, sample.target, &params, s.dt)?;
        let out = stack::run(problem, &problem.agents(&Prediction::from_model(&pred)), &w, &cfg)?;
        let (Some(plan), Some(sol)) = (&out.plan, &out.control) else {
            tally.skipped += 1;
            continue;
        };
        let agents = problem.agents(&Prediction::from_model(&pred));
        let ctx = problem.plan_context(&agents, cfg.cost).cost_ctx(out.lane);
        if losses.ctr_skipped || !usable(sol, &ctx, &w, &cfg.ilqr.limits) {
            tally.skipped += 1;
            continue;
        }
        let expansion = sol.trajectory.clone();
        let f = |theta: &[f64]| {
            let q = PredictorParams { shape, theta: theta.to_vec() };
            final_map_loss(&sample, &q, &expansion, plan.selected, out.lane, &w, &cfg).unwrap_or(f64::NAN)
        };
        let coords = diffcheck::sample_coords(params.theta.len(), MAX_SAMPLED_COORDS, seed + i as u64);
        let r = diffcheck::check(f, |_| grads.theta.clone(), &params.theta, DEFAULT_STEP, GradTarget::EndToEnd.tolerance(), Some(&coords));
        if r.coords.iter().map(|c| c.numeric * c.numeric).sum::<f64>().sqrt() < MIN_SENSITIVITY {
            tally.skipped += 1;
            continue;
        }
        tally.record(r);
    }
    Ok(())
}

/// Largest stage change allowed for one more full LQR step at the solution.
const RESIDUAL_MAX: f64 = 1e-6;
/// Controls closer than this to a bound may switch clamping inside the
/// difference stencil.
const BOUND_MARGIN: f64 = 1e-4;

/// Differentiable, at a fixed point, and away from the control bounds.
fn usable(sol: &controller::IlqrSolution, ctx: &CostContext, w: &CostWeights, limits: &ControlLimits) -> bool {
    if !sol.differentiable() {
        return false;
    }
    let (lo, hi) = (limits.lower_array(), limits.upper_array());
    let near = sol.trajectory.controls.iter().any(|u| {
        let u = u.to_array();
        (0..2).any(|i| (u[i] - lo[i]).abs() < BOUND_MARGIN || (hi[i] - u[i]).abs() < BOUND_MARGIN)
    });
    if near {
        return false;
    }
    controller::final_lqr_map(&sol.trajectory, ctx, w, limits).is_some_and(|z| {
        z.iter().enumerate().all(|(t, v)| (v - stage_vec(&sol.trajectory, t)).norm() < RESIDUAL_MAX)
    })
}

fn stage_vec(traj: &Trajectory, t: usize) -> Vec6 {
    let s = traj.states[t].to_array();
    let u = traj.controls.get(t).map_or([0.0; 2], Control::to_array);
    Vec6::from_iterator(s.into_iter().chain(u))
}

/// Hindsight cost of the last LQR approximation's solution around
/// `expansion` under the predictions of `params`. `None` when the planner
/// selection changes.
fn final_map_loss(sample: &Sample, params: &PredictorParams, expansion: &Trajectory, selected: usize, lane: usize, w: &CostWeights, cfg: &StackConfig) -> Option<f64> {
    let problem = &sample.problem;
    let pred = predictor::predict(&sample.histories, sample.target, params, sample.scenario.dt).ok()?;
    let agents = problem.agents(&Prediction::from_model(&pred));
    let ctx = problem.plan_context(&agents, cfg.cost);
    let set = planner::cost_and_select(problem.candidates.clone(), &ctx, w, cfg.planner.beta).ok()?;
    if set.selected != selected {
        return None;
    }
    let z = controller::final_lqr_map(expansion, &ctx.cost_ctx(lane), w, &cfg.ilqr.limits)?;
    let horizon = expansion.horizon();
    let flat: Vec<f64> = z.iter().flat_map(|v| v.iter().cloned().collect::<Vec<_>>()).collect();
    problem.hindsight_cost(&unflatten(&flat, expansion.dt, horizon), lane, cfg.cost).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_names_round_trip() {
        for t in GradTarget::ALL {
            assert_eq!(t.name().parse::<GradTarget>().unwrap(), t);
        }
        assert_eq!("end-to-end".parse::<GradTarget>().unwrap(), GradTarget::EndToEnd);
        assert!("nope".parse::<GradTarget>().is_err());
    }

    #[test]
    fn small_suites_pass() {
        for t in [GradTarget::Dynamics, GradTarget::Cost, GradTarget::Planner, GradTarget::Predictor, GradTarget::Controller] {
            let r = run(t, 1, 10).unwrap();
            assert!(r.passed(), "{t}: {:?}", (r.max_relative_error, r.failed, r.skipped));
        }
    }

    #[test]
    fn suites_are_deterministic() {
        assert_eq!(run(GradTarget::Cost, 3, 5).unwrap(), run(GradTarget::Cost, 3, 5).unwrap());
    }
}
