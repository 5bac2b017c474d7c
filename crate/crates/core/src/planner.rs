//! Sampling planner: lane-centric spline candidates, argmin selection, and
//! the softmax relaxation used as a classifier during training.

use serde::{Deserialize, Serialize};

use crate::cost::{self, AgentFuture, CostContext, CostParams, CostWeights, PredictionGrads, NUM_TERMS};
use crate::dynamics::{rollout, wrap_angle, Control, ControlLimits, State, Trajectory};
use crate::error::{Error, Result};
use crate::lanegeo::{candidate_lanes, LaneGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub accel_set: Vec<f64>,
    pub lateral_offsets: Vec<f64>,
    pub beta: f64,
    /// Horizon in steps.
    pub horizon: usize,
    pub dt: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            accel_set: vec![-3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0],
            lateral_offsets: vec![-0.5, 0.0, 0.5],
            beta: 1.0,
            horizon: 6,
            dt: 0.5,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || self.accel_set.is_empty() || self.lateral_offsets.is_empty() {
            return Err(Error::Config("planner needs beta > 0 and non-empty sample sets".into()));
        }
        if self.horizon < 3 || !(self.dt > 0.0) {
            return Err(Error::Config("planner needs at least 3 steps and dt > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub trajectory: Trajectory,
    /// Index into the lane graph.
    pub lane: usize,
    pub accel: f64,
    pub offset: f64,
}

/// Costed candidates. `terms[n]` are the unweighted cost terms of candidate
/// `n` against its own lane.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub terms: Vec<[f64; NUM_TERMS]>,
    pub costs: Vec<f64>,
    pub probs: Vec<f64>,
    pub selected: usize,
    pub beta: f64,
}

/// Everything the cost needs except the lane, which comes from each candidate.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub agents: &'a [AgentFuture],
    pub goal: State,
    pub graph: &'a LaneGraph,
    pub params: CostParams,
}

impl<'a> PlanContext<'a> {
    pub fn new(agents: &'a [AgentFuture], goal: State, graph: &'a LaneGraph) -> Self {
        PlanContext { agents, goal, graph, params: CostParams::default() }
    }

    pub fn cost_ctx(&self, lane: usize) -> CostContext<'a> {
        CostContext { agents: self.agents, goal: self.goal, lane: &self.graph.lanes()[lane], params: self.params }
    }
}

/// Arclength travelled in `horizon` seconds at constant acceleration, never
/// reversing.
fn travel(v0: f64, a: f64, horizon: f64) -> f64 {
    if v0 + a * horizon >= 0.0 {
        v0 * horizon + 0.5 * a * horizon * horizon
    } else {
        v0 * v0 / (2.0 * a.abs())
    }
}

pub fn generate_candidates(ego: &State, goal: &State, graph: &LaneGraph, cfg: &PlannerConfig, limits: &ControlLimits) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    if !ego.is_finite() {
        return Err(Error::domain("ego state is not finite"));
    }
    let horizon = cfg.horizon as f64 * cfg.dt;
    let lanes = candidate_lanes(graph, goal);
    let mut out = Vec::new();
    for lane in lanes {
        let lane_idx = graph.lanes().iter().position(|l| std::ptr::eq(l, lane)).unwrap();
        let s0 = lane.project(ego.pos()).arclength;
        for &a in &cfg.accel_set {
            let s_t = s0 + travel(ego.v.max(0.0), a, horizon).max(0.0);
            let v_t = (ego.v + a * horizon).max(0.0);
            for &d in &cfg.lateral_offsets {
                let (p, heading) = lane.point_at(s_t, d);
                if let Some(trajectory) = fit_spline(ego, p, heading, v_t, cfg.horizon, cfg.dt, limits) {
                    out.push(Candidate { trajectory, lane: lane_idx, accel: a, offset: d });
                }
            }
        }
    }
    if out.len() < 2 {
        return Err(Error::Rejected(format!("{} feasible planner candidates", out.len())));
    }
    Ok(out)
}

/// Cubic in time whose first and last Euler chords match the boundary
/// velocities, so inverse dynamics reproduces the sampled positions.
/// Returns `None` when infeasible.
pub fn fit_spline(start: &State, end_pos: [f64; 2], end_heading: f64, end_speed: f64, steps: usize, dt: f64, limits: &ControlLimits) -> Option<Trajectory> {
    if steps < 3 || !(dt > 0.0) || end_speed < 0.0 || start.v < 0.0 {
        return None;
    }
    let total = steps as f64 * dt;
    let tm = total - dt;
    // unknowns (c1, c2, c3) per axis
    let m = nalgebra::Matrix3::new(
        1.0, dt, dt * dt,
        total, total * total, total.powi(3),
        1.0, (total * total - tm * tm) / dt, (total.powi(3) - tm.powi(3)) / dt,
    );
    let inv = m.try_inverse()?;
    let d0 = [start.heading.cos(), start.heading.sin()];
    let d1 = [end_heading.cos(), end_heading.sin()];
    let p0 = start.pos();
    let mut coef = [[0.0; 3]; 2];
    for ax in 0..2 {
        let rhs = nalgebra::Vector3::new(start.v * d0[ax], end_pos[ax] - p0[ax], end_speed * d1[ax]);
        let c = inv * rhs;
        coef[ax] = [c[0], c[1], c[2]];
    }
    let pos = |tau: f64| -> [f64; 2] {
        let f = |ax: usize| p0[ax] + tau * (coef[ax][0] + tau * (coef[ax][1] + tau * coef[ax][2]));
        [f(0), f(1)]
    };
    let vel = |tau: f64| -> [f64; 2] {
        let f = |ax: usize| coef[ax][0] + tau * (2.0 * coef[ax][1] + 3.0 * tau * coef[ax][2]);
        [f(0), f(1)]
    };
    let samples: Vec<[f64; 2]> = (0..=steps).map(|t| pos(t as f64 * dt)).collect();

    let mut headings = vec![start.heading];
    let mut speeds = vec![start.v];
    for t in 1..steps {
        let c = [samples[t + 1][0] - samples[t][0], samples[t + 1][1] - samples[t][1]];
        let len = c[0].hypot(c[1]);
        let tangent = vel((t as f64 + 0.5) * dt);
        if c[0] * tangent[0] + c[1] * tangent[1] < 0.0 {
            return None;
        }
        headings.push(if len > 0.0 { c[1].atan2(c[0]) } else { headings[t - 1] });
        speeds.push(len / dt);
    }
    headings.push(end_heading);
    speeds.push(end_speed);
    let controls: Vec<Control> = (0..steps)
        .map(|t| Control::new(wrap_angle(headings[t + 1] - headings[t]) / dt, (speeds[t + 1] - speeds[t]) / dt))
        .collect();
    if !controls.iter().all(|u| u.is_finite() && limits.contains(u)) {
        return None;
    }
    let traj = rollout(start, &controls, dt).ok()?;
    traj.states.iter().all(|s| s.v >= 0.0).then_some(traj)
}

/// Index of the minimum; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// `softmax(-beta * costs)`.
pub fn softmax_neg(costs: &[f64], beta: f64) -> Vec<f64> {
    let lo = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = costs.iter().map(|c| (-beta * (c - lo)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn cost_and_select(candidates: Vec<Candidate>, ctx: &PlanContext, w: &CostWeights, beta: f64) -> Result<CandidateSet> {
    if candidates.is_empty() {
        return Err(Error::domain("no planner candidates"));
    }
    let terms = candidates
        .iter()
        .map(|c| cost::terms(&c.trajectory, &ctx.cost_ctx(c.lane)))
        .collect::<Result<Vec<_>>>()?;
    Ok(complete(candidates, terms, w, beta))
}

/// Finishes a set from precomputed unweighted terms.
pub fn complete(candidates: Vec<Candidate>, terms: Vec<[f64; NUM_TERMS]>, w: &CostWeights, beta: f64) -> CandidateSet {
    let wv = w.weights();
    let costs: Vec<f64> = terms.iter().map(|t| t.iter().zip(&wv).map(|(a, b)| a * b).sum()).collect();
    let probs = softmax_neg(&costs, beta);
    let selected = argmin(&costs);
    CandidateSet { candidates, terms, costs, probs, selected, beta }
}

impl CandidateSet {
    pub fn selected_trajectory(&self) -> &Trajectory {
        &self.candidates[self.selected].trajectory
    }

    pub fn selected_lane(&self) -> usize {
        self.candidates[self.selected].lane
    }
}

/// Cross-entropy of the softmax against `target` and its gradient in the
/// costs, `beta * (1{n = target} - p_n)`.
pub fn planning_loss(set: &CandidateSet, target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= set.costs.len() {
        return Err(Error::domain(format!("target {target} out of {} candidates", set.costs.len())));
    }
    let beta = set.beta;
    let lo = set.costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let lse = set.costs.iter().map(|c| (-beta * (c - lo)).exp()).sum::<f64>().ln();
    let ce = beta * (set.costs[target] - lo) + lse;
    let grad = set.probs.iter().enumerate().map(|(n, p)| beta * (if n == target { 1.0 } else { 0.0 } - p)).collect();
    Ok((ce, grad))
}

/// Pushes cost gradients `dl_dcost` back onto the weights and the predicted
/// agents' outputs.
pub fn cost_backward(set: &CandidateSet, ctx: &PlanContext, w: &CostWeights, dl_dcost: &[f64]) -> Result<([f64; NUM_TERMS], Vec<PredictionGrads>)> {
    let mut dw = [0.0; NUM_TERMS];
    let mut preds: Vec<PredictionGrads> = ctx.agents.iter().map(PredictionGrads::zeros_like).collect();
    let any_pred = ctx.agents.iter().any(|a| a.predicted);
    for (n, (&g, c)) in dl_dcost.iter().zip(&set.candidates).enumerate() {
        for i in 0..NUM_TERMS {
            dw[i] += g * set.terms[n][i];
        }
        if any_pred && g != 0.0 {
            let gp = cost::grad_predictions(&c.trajectory, &ctx.cost_ctx(c.lane), w)?;
            for (acc, p) in preds.iter_mut().zip(&gp) {
                acc.add_scaled(p, g);
            }
        }
    }
    Ok((dw, preds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Rl,
    Il,
}

/// Candidate with the lowest hindsight cost: logged futures, fixed weights.
pub fn select_target_rl(candidates: &[Candidate], hindsight: &PlanContext, fixed: &CostWeights) -> Result<usize> {
    let costs = candidates
        .iter()
        .map(|c| cost::evaluate(&c.trajectory, &hindsight.cost_ctx(c.lane), fixed))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmin(&costs))
}

/// Root-mean-squared 2D position distance over the horizon.
pub fn rms_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    let n = a.states.len().min(b.states.len());
    let ss: f64 = (1..n).map(|t| a.states[t].dist(&b.states[t]).powi(2)).sum();
    (ss / (n - 1).max(1) as f64).sqrt()
}

/// Candidate nearest to the logged ego trajectory.
pub fn select_target_il(candidates: &[Candidate], gt_ego: &Trajectory) -> usize {
    let d: Vec<f64> = candidates.iter().map(|c| rms_distance(&c.trajectory, gt_ego)).collect();
    argmin(&d)
}
