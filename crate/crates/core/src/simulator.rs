//! Closed-loop log replay: the ego follows the stack, everyone else follows
//! the log.

use serde::{Deserialize, Serialize};

use crate::cost::{self, CostParams, CostWeights, COLLISION, EFFORT, LANE_ANG, LANE_LAT, NUM_TERMS};
use crate::dynamics::{self, Control, State, Trajectory};
use crate::error::{Error, Result};
use crate::predictor::{self, PredictorParams};
use crate::scenario::{AgentTrack, Scenario};
use crate::stack::{self, PlanningProblem, Prediction, StackConfig};
use crate::training::{mean_and_se, Checkpoint, EvalRun};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Simulated time in seconds.
    pub t_sim: f64,
    pub replan_interval: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { t_sim: 10.0, replan_interval: 0.5 }
    }
}

impl SimConfig {
    /// `(simulation steps, steps per replan)` for a step of `dt`.
    pub fn steps(&self, dt: f64) -> Result<(usize, usize)> {
        let whole = |x: f64| {
            let n = (x / dt).round();
            (n >= 1.0 && (n * dt - x).abs() < 1e-9).then_some(n as usize)
        };
        let sim = whole(self.t_sim).ok_or_else(|| Error::Config(format!("t_sim {} is not a multiple of dt {dt}", self.t_sim)))?;
        let replan = whole(self.replan_interval).ok_or_else(|| Error::Config(format!("replan interval {} is not a multiple of dt {dt}", self.replan_interval)))?;
        Ok((sim, replan))
    }
}

/// Output of one replan.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub plan: Trajectory,
    /// Lane index used by the controller.
    pub lane: usize,
    /// Whether the plan came from a fallback instead of the stack.
    pub fallback: bool,
}

/// Decides the ego plan given the scenario as it looks at the current
/// simulation step.
pub trait Policy {
    fn plan(&mut self, snapshot: &Scenario, sim_step: usize) -> Result<PolicyOutput>;
}

/// Feeds the logged ego controls.
pub struct ReplayPolicy<'a> {
    pub log: &'a Scenario,
}

impl Policy for ReplayPolicy<'_> {
    fn plan(&mut self, snapshot: &Scenario, sim_step: usize) -> Result<PolicyOutput> {
        let t = snapshot.horizon_steps;
        let controls = &self.log.ego().future_controls[sim_step..sim_step + t];
        let plan = dynamics::rollout(snapshot.ego().current(), controls, snapshot.dt)?;
        let problem = PlanningProblem::predicted_only(snapshot, &StackConfig::default());
        let lane = problem.map(|p| p.reference_lane).unwrap_or(0);
        Ok(PolicyOutput { plan, lane, fallback: false })
    }
}

/// Which predictions the stack plans with.
#[derive(Debug, Clone, Copy)]
pub enum PredictionMode<'a> {
    Ignore,
    GroundTruth,
    Learned(&'a PredictorParams),
}

/// The stack as a closed-loop policy. Only the predicted agent is planned
/// against.
pub struct StackPolicy<'a> {
    pub mode: PredictionMode<'a>,
    pub weights: CostWeights,
    pub cfg: StackConfig,
}

impl Policy for StackPolicy<'_> {
    fn plan(&mut self, snapshot: &Scenario, _sim_step: usize) -> Result<PolicyOutput> {
        let problem = PlanningProblem::predicted_only(snapshot, &self.cfg)?;
        let prediction = match self.mode {
            PredictionMode::Ignore => Prediction::Ignore,
            PredictionMode::GroundTruth => Prediction::GroundTruth,
            PredictionMode::Learned(params) => {
                let pred = predictor::predict(&snapshot.histories(), snapshot.predicted_index(), params, snapshot.dt)?;
                Prediction::from_model(&pred)
            }
        };
        let out = stack::run(&problem, &problem.agents(&prediction), &self.weights, &self.cfg)?;
        Ok(PolicyOutput { plan: out.ego_trajectory, lane: out.lane, fallback: false })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopMetrics {
    pub trajectory_cost: f64,
    pub open_loop_cost: f64,
    pub collision_cost: f64,
    pub lane_cost: f64,
    pub control_effort: f64,
    pub deviation: f64,
}

impl ClosedLoopMetrics {
    pub const NAMES: [&'static str; 6] = ["trajectory_cost", "open_loop_cost", "collision_cost", "lane_cost", "control_effort", "deviation"];

    pub fn values(&self) -> [f64; 6] {
        [self.trajectory_cost, self.open_loop_cost, self.collision_cost, self.lane_cost, self.control_effort, self.deviation]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub scenario_id: String,
    /// Simulated ego states `0..=N` and controls `0..N`.
    pub ego: Trajectory,
    /// Non-ego agent states per simulation step `0..=N`, in scenario order.
    pub agents: Vec<Vec<State>>,
    /// Plan made at each replan.
    pub plans: Vec<Trajectory>,
    pub replan_steps: Vec<usize>,
    pub goals: Vec<State>,
    /// Lane used at each simulation step `0..N`.
    pub lanes: Vec<usize>,
    /// Hindsight cost of each plan.
    pub open_loop_costs: Vec<f64>,
    pub fallbacks: usize,
}

/// The long scenario as seen `sim_step` steps into the simulation, with the
/// ego history replaced by the simulated states.
pub fn snapshot(log: &Scenario, sim_step: usize, sim_ego: &[State]) -> Scenario {
    let p = log.past_steps;
    let t = log.horizon_steps;
    let cut = |a: &AgentTrack| -> AgentTrack {
        let past: Vec<State> = (sim_step..=sim_step + p).map(|k| *a.state_at(k)).collect();
        let future: Vec<State> = (sim_step + p + 1..=sim_step + p + t).map(|k| *a.state_at(k)).collect();
        let future_controls = a.future_controls[sim_step..sim_step + t].to_vec();
        AgentTrack { id: a.id.clone(), past, future, future_controls }
    };
    let agents = log
        .agents
        .iter()
        .map(|a| {
            let mut c = cut(a);
            if a.id == log.ego_id {
                // simulated states replace the log from the simulation start on
                for (j, s) in sim_ego.iter().enumerate().take(sim_step + 1) {
                    let k = p + j;
                    if k >= sim_step {
                        c.past[k - sim_step] = *s;
                    }
                }
            }
            c
        })
        .collect();
    let ego_log = log.ego();
    Scenario {
        id: format!("{}@{}", log.id, sim_step),
        family: log.family,
        dt: log.dt,
        past_steps: p,
        horizon_steps: t,
        agents,
        ego_id: log.ego_id.clone(),
        predicted_agent_id: log.predicted_agent_id.clone(),
        lane_graph: log.lane_graph.clone(),
        goal: *ego_log.state_at(sim_step + p + t),
    }
}

pub fn simulate(log: &Scenario, policy: &mut dyn Policy, cfg: &SimConfig) -> Result<SimResult> {
    let (n, every) = cfg.steps(log.dt)?;
    let needed = n + log.horizon_steps;
    if log.future_steps() < needed {
        return Err(Error::Rejected(format!("scenario {} has {} future steps, simulation needs {needed}", log.id, log.future_steps())));
    }
    let limits = crate::dynamics::ControlLimits::default();
    let mut ego = vec![*log.ego().current()];
    let mut controls: Vec<Control> = Vec::with_capacity(n);
    let mut result = SimResult {
        scenario_id: log.id.clone(),
        ego: Trajectory { states: Vec::new(), controls: Vec::new(), dt: log.dt },
        agents: Vec::new(),
        plans: Vec::new(),
        replan_steps: Vec::new(),
        goals: Vec::new(),
        lanes: Vec::with_capacity(n),
        open_loop_costs: Vec::new(),
        fallbacks: 0,
    };
    let mut k = 0;
    while k < n {
        let snap = snapshot(log, k, &ego);
        let out = match policy.plan(&snap, k) {
            Ok(o) => o,
            Err(Error::Rejected(_)) => {
                // keep executing the previous plan, or brake gently without one
                let prev = result.plans.last().map(|p| {
                    let used = k - result.replan_steps.last().unwrap();
                    p.controls[used.min(p.controls.len())..].to_vec()
                });
                let mut us = prev.unwrap_or_default();
                us.resize(snap.horizon_steps, Control::new(0.0, -1.0));
                let us: Vec<Control> = us.iter().map(|u| limits.clamp(u)).collect();
                let plan = dynamics::rollout(snap.ego().current(), &us, snap.dt)?;
                let lane = result.lanes.last().copied().unwrap_or(0);
                PolicyOutput { plan, lane, fallback: true }
            }
            Err(e) => return Err(e),
        };
        if out.fallback {
            result.fallbacks += 1;
        }
        let problem_agents: Vec<cost::AgentFuture> = snap
            .agents
            .iter()
            .filter(|a| a.id != snap.ego_id)
            .map(|a| cost::AgentFuture::logged(a.future_positions(0, snap.horizon_steps)))
            .collect();
        let ctx = cost::CostContext { agents: &problem_agents, goal: snap.goal, lane: &snap.lane_graph.lanes()[out.lane], params: CostParams::default() };
        result.open_loop_costs.push(cost::evaluate(&out.plan, &ctx, &CostWeights::hand_tuned())?);
        let run = every.min(n - k).min(out.plan.horizon());
        for u in &out.plan.controls[..run] {
            let next = dynamics::step(ego.last().unwrap(), u, log.dt)?;
            ego.push(next);
            controls.push(*u);
            result.lanes.push(out.lane);
        }
        result.replan_steps.push(k);
        result.goals.push(snap.goal);
        result.plans.push(out.plan);
        k += run;
    }
    let p = log.past_steps;
    result.agents = log.agents.iter().filter(|a| a.id != log.ego_id).map(|a| (0..=n).map(|j| *a.state_at(p + j)).collect()).collect();
    result.ego = Trajectory { states: ego, controls, dt: log.dt };
    Ok(result)
}

/// Unweighted per-step terms of the simulated trajectory against all logged
/// agents; step `t` pairs control `t` with state `t + 1`.
pub fn step_terms(result: &SimResult, log: &Scenario, params: &CostParams) -> Vec<[f64; NUM_TERMS]> {
    let lanes = log.lane_graph.lanes();
    (0..result.ego.horizon())
        .map(|t| {
            let positions: Vec<[f64; 2]> = result.agents.iter().map(|a| a[t + 1].pos()).collect();
            cost::step_terms(&result.ego.states[t + 1], &result.ego.controls[t], &positions, &lanes[result.lanes[t]], params)
        })
        .collect()
}

pub fn closed_loop_metrics(result: &SimResult, log: &Scenario, w: &CostWeights) -> ClosedLoopMetrics {
    let terms = step_terms(result, log, &CostParams::default());
    let wv = w.weights();
    let n = terms.len().max(1) as f64;
    let mut m = ClosedLoopMetrics::default();
    for t in &terms {
        m.collision_cost += wv[COLLISION] * t[COLLISION] / n;
        m.lane_cost += (wv[LANE_LAT] * t[LANE_LAT] + wv[LANE_ANG] * t[LANE_ANG]) / n;
        m.control_effort += wv[EFFORT] * t[EFFORT] / n;
    }
    m.trajectory_cost = m.collision_cost + m.lane_cost + m.control_effort;
    m.open_loop_cost = result.open_loop_costs.iter().sum::<f64>() / result.open_loop_costs.len().max(1) as f64;
    let p = log.past_steps;
    let ego_log = log.ego();
    m.deviation = (1..result.ego.states.len()).map(|t| result.ego.states[t].dist(ego_log.state_at(p + t))).sum::<f64>() / n;
    m
}

/// Closed-loop GT-prediction trajectory cost below No-prediction.
pub fn certify(log: &Scenario, cfg: &StackConfig) -> Result<bool> {
    let w = CostWeights::hand_tuned();
    let cost_of = |mode| -> Result<f64> {
        let mut policy = StackPolicy { mode, weights: w.clone(), cfg: cfg.clone() };
        let r = simulate(log, &mut policy, &SimConfig::default())?;
        Ok(closed_loop_metrics(&r, log, &w).trajectory_cost)
    };
    Ok(cost_of(PredictionMode::GroundTruth)? < cost_of(PredictionMode::Ignore)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoopRecord {
    pub run: String,
    pub seed: Option<u64>,
    pub scenario: String,
    pub metrics: ClosedLoopMetrics,
    pub fallbacks: usize,
}

/// Per-run metric means grouped by label, with standard errors over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoopGroup {
    pub run: String,
    pub seeds: usize,
    pub mean: [f64; 6],
    pub se: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoopReport {
    pub records: Vec<ClosedLoopRecord>,
    pub groups: Vec<ClosedLoopGroup>,
    pub skipped: Vec<String>,
}

impl ClosedLoopReport {
    pub fn group(&self, run: &str) -> Option<&ClosedLoopGroup> {
        self.groups.iter().find(|g| g.run == run)
    }
}

/// Simulates the baselines and every checkpoint on each long scenario.
/// Metrics use the hand-tuned weights regardless of the policy's weights.
pub fn evaluate_closed_loop(scenarios: &[Scenario], checkpoints: &[Checkpoint], cfg: &StackConfig, sim: &SimConfig) -> Result<ClosedLoopReport> {
    let mut usable = Vec::new();
    let mut skipped = Vec::new();
    for s in scenarios {
        let (n, _) = sim.steps(s.dt)?;
        if s.future_steps() < n + s.horizon_steps {
            skipped.push(s.id.clone());
        } else {
            usable.push(s);
        }
    }
    let mut runs = vec![EvalRun::NoPrediction, EvalRun::GroundTruth];
    runs.extend(checkpoints.iter().map(EvalRun::Model));
    let hand = CostWeights::hand_tuned();
    let mut records = Vec::new();
    let mut per_run: Vec<(String, [f64; 6])> = Vec::new();
    for run in &runs {
        let (mode, weights) = match run {
            EvalRun::NoPrediction => (PredictionMode::Ignore, hand.clone()),
            EvalRun::GroundTruth => (PredictionMode::GroundTruth, hand.clone()),
            EvalRun::Model(c) => (PredictionMode::Learned(&c.predictor), c.weights.clone()),
        };
        let mut policy = StackPolicy { mode, weights, cfg: cfg.clone() };
        let mut mean = [0.0; 6];
        for s in &usable {
            let r = simulate(s, &mut policy, sim)?;
            let metrics = closed_loop_metrics(&r, s, &hand);
            for (m, v) in mean.iter_mut().zip(metrics.values()) {
                *m += v / usable.len() as f64;
            }
            records.push(ClosedLoopRecord { run: run.label(), seed: run.seed(), scenario: s.id.clone(), metrics, fallbacks: r.fallbacks });
        }
        per_run.push((run.label(), mean));
    }
    let mut groups: Vec<ClosedLoopGroup> = Vec::new();
    for (label, _) in &per_run {
        if groups.iter().any(|g| &g.run == label) {
            continue;
        }
        let members: Vec<&[f64; 6]> = per_run.iter().filter(|(l, _)| l == label).map(|(_, m)| m).collect();
        let stats = [0, 1, 2, 3, 4, 5].map(|i| mean_and_se(&members.iter().map(|m| m[i]).collect::<Vec<_>>()));
        groups.push(ClosedLoopGroup { run: label.clone(), seeds: members.len(), mean: stats.map(|x| x.0), se: stats.map(|x| x.1) });
    }
    Ok(ClosedLoopReport { records, groups, skipped })
}
