//! Predict, plan, control: the forward pass shared by training, evaluation
//! and simulation.

use serde::{Deserialize, Serialize};

use crate::controller::{self, IlqrConfig, IlqrSolution};
use crate::cost::{self, AgentFuture, CostParams, CostWeights};
use crate::dynamics::{rollout, Control, State, Trajectory};
use crate::error::{Error, Result};
use crate::lanegeo::{candidate_lanes, LaneGraph};
use crate::planner::{self, Candidate, CandidateSet, PlanContext, PlannerConfig};
use crate::predictor::{self, PredictorParams, TrajectoryPrediction};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// The selected candidate is the output; no controller.
    PlannerOnly,
    /// iLQR from a zero-control rollout on the reference lane; no planner loss.
    ControllerOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StackConfig {
    pub planner: PlannerConfig,
    pub ilqr: IlqrConfig,
    pub cost: CostParams,
    pub ablation: Ablation,
}

impl StackConfig {
    /// Planner settings with horizon and step taken from the scenario.
    pub fn planner_for(&self, s: &Scenario) -> PlannerConfig {
        PlannerConfig { horizon: s.horizon_steps, dt: s.dt, ..self.planner.clone() }
    }
}

/// How the predicted agent enters planning.
#[derive(Debug, Clone)]
pub enum Prediction {
    /// Ignored (No-prediction baseline).
    Ignore,
    /// Logged future (GT-prediction oracle).
    GroundTruth,
    Mixture(AgentFuture),
}

impl Prediction {
    pub fn from_model(pred: &TrajectoryPrediction) -> Self {
        Prediction::Mixture(AgentFuture::predicted(pred.mode_positions(), pred.probs.clone()))
    }
}

/// Per-scenario quantities that do not depend on the predictor or weights.
#[derive(Debug, Clone)]
pub struct PlanningProblem {
    pub scenario_id: String,
    pub ego: State,
    pub goal: State,
    pub graph: LaneGraph,
    pub dt: f64,
    pub candidates: Vec<Candidate>,
    /// Logged future of the predicted agent.
    pub gt_prediction: AgentFuture,
    /// Logged futures of the remaining agents, always used for planning.
    pub others: Vec<AgentFuture>,
    pub gt_ego: Trajectory,
    pub rl_target: usize,
    pub il_target: usize,
    /// Candidate lane whose centerline passes nearest the goal.
    pub reference_lane: usize,
}

impl PlanningProblem {
    pub fn new(s: &Scenario, cfg: &StackConfig) -> Result<Self> {
        let others: Vec<AgentFuture> = s.others().map(|a| AgentFuture::logged(a.future_positions(0, s.horizon_steps))).collect();
        Self::build(s, cfg, others)
    }

    /// Variant that ignores every agent except the predicted one.
    pub fn predicted_only(s: &Scenario, cfg: &StackConfig) -> Result<Self> {
        Self::build(s, cfg, Vec::new())
    }

    fn build(s: &Scenario, cfg: &StackConfig, others: Vec<AgentFuture>) -> Result<Self> {
        let ego = *s.ego().current();
        let candidates = planner::generate_candidates(&ego, &s.goal, &s.lane_graph, &cfg.planner_for(s), &cfg.ilqr.limits)?;
        let gt_prediction = s.gt_future(&s.predicted_agent_id).expect("validated scenario");
        let gt_ego = s.gt_ego();
        let lanes = candidate_lanes(&s.lane_graph, &s.goal);
        let reference = lanes
            .iter()
            .min_by(|a, b| {
                let da = a.project(s.goal.pos()).signed_lateral_offset.abs();
                let db = b.project(s.goal.pos()).signed_lateral_offset.abs();
                da.total_cmp(&db)
            })
            .ok_or_else(|| Error::Rejected("no candidate lane near the goal".into()))?;
        let reference_lane = s.lane_graph.lanes().iter().position(|l| std::ptr::eq(l, *reference)).unwrap();
        let mut p = PlanningProblem {
            scenario_id: s.id.clone(),
            ego,
            goal: s.goal,
            graph: s.lane_graph.clone(),
            dt: s.dt,
            candidates,
            gt_prediction,
            others,
            gt_ego,
            rl_target: 0,
            il_target: 0,
            reference_lane,
        };
        let hindsight = p.hindsight_agents();
        let mut ctx = PlanContext::new(&hindsight, p.goal, &p.graph);
        ctx.params = cfg.cost;
        p.rl_target = planner::select_target_rl(&p.candidates, &ctx, &CostWeights::hand_tuned())?;
        p.il_target = planner::select_target_il(&p.candidates, &p.gt_ego);
        Ok(p)
    }

    pub fn horizon(&self) -> usize {
        self.gt_ego.horizon()
    }

    /// Agents seen by the planner and controller; the predicted agent, when
    /// present, comes first.
    pub fn agents(&self, prediction: &Prediction) -> Vec<AgentFuture> {
        let first = match prediction {
            Prediction::Ignore => None,
            Prediction::GroundTruth => Some(self.gt_prediction.clone()),
            Prediction::Mixture(f) => Some(f.clone()),
        };
        first.into_iter().chain(self.others.iter().cloned()).collect()
    }

    /// Logged futures of all agents.
    pub fn hindsight_agents(&self) -> Vec<AgentFuture> {
        self.agents(&Prediction::GroundTruth)
    }

    pub fn plan_context<'a>(&'a self, agents: &'a [AgentFuture], params: CostParams) -> PlanContext<'a> {
        PlanContext { agents, goal: self.goal, graph: &self.graph, params }
    }

    /// Hindsight cost of an ego trajectory against the logged futures with
    /// the hand-tuned weights, on the given lane.
    pub fn hindsight_cost(&self, traj: &Trajectory, lane: usize, params: CostParams) -> Result<f64> {
        let agents = self.hindsight_agents();
        cost::evaluate(traj, &self.plan_context(&agents, params).cost_ctx(lane), &CostWeights::hand_tuned())
    }
}

#[derive(Debug, Clone)]
pub struct StackOutput {
    /// `None` for the controller-only ablation.
    pub plan: Option<CandidateSet>,
    pub control: Option<IlqrSolution>,
    /// Lane used by the controller (and the hindsight cost).
    pub lane: usize,
    pub ego_trajectory: Trajectory,
}

/// Runs planner and controller with the given agents.
pub fn run(problem: &PlanningProblem, agents: &[AgentFuture], w: &CostWeights, cfg: &StackConfig) -> Result<StackOutput> {
    let ctx = problem.plan_context(agents, cfg.cost);
    match cfg.ablation {
        Ablation::Full | Ablation::PlannerOnly => {
            let set = planner::cost_and_select(problem.candidates.clone(), &ctx, w, cfg.planner.beta)?;
            let lane = set.selected_lane();
            if cfg.ablation == Ablation::PlannerOnly {
                let ego_trajectory = set.selected_trajectory().clone();
                return Ok(StackOutput { plan: Some(set), control: None, lane, ego_trajectory });
            }
            let sol = controller::solve(set.selected_trajectory(), &ctx.cost_ctx(lane), w, &cfg.ilqr)?;
            let ego_trajectory = sol.trajectory.clone();
            Ok(StackOutput { plan: Some(set), control: Some(sol), lane, ego_trajectory })
        }
        Ablation::ControllerOnly => {
            let lane = problem.reference_lane;
            let init = rollout(&problem.ego, &vec![Control::default(); problem.horizon()], problem.dt)?;
            let sol = controller::solve(&init, &ctx.cost_ctx(lane), w, &cfg.ilqr)?;
            let ego_trajectory = sol.trajectory.clone();
            Ok(StackOutput { plan: None, control: Some(sol), lane, ego_trajectory })
        }
    }
}

/// Convenience forward pass with a learned predictor.
pub fn run_learned(s: &Scenario, problem: &PlanningProblem, params: &PredictorParams, w: &CostWeights, cfg: &StackConfig) -> Result<(TrajectoryPrediction, StackOutput)> {
    let pred = predictor::predict(&s.histories(), s.predicted_index(), params, s.dt)?;
    let agents = problem.agents(&Prediction::from_model(&pred));
    let out = run(problem, &agents, w, cfg)?;
    Ok((pred, out))
}

/// Hindsight cost of the stack output for a given treatment of the predicted
/// agent.
pub fn hindsight_of(problem: &PlanningProblem, prediction: &Prediction, w: &CostWeights, cfg: &StackConfig) -> Result<f64> {
    let agents = problem.agents(prediction);
    let out = run(problem, &agents, w, cfg)?;
    problem.hindsight_cost(&out.ego_trajectory, out.lane, cfg.cost)
}

/// Whether knowing the predicted agent's future helps: for short scenarios,
/// GT-prediction hindsight cost below No-prediction; for long scenarios, the
/// same ordering of closed-loop trajectory cost.
pub fn certify(s: &Scenario, cfg: &StackConfig, long: bool) -> Result<bool> {
    if long {
        return crate::simulator::certify(s, cfg);
    }
    let problem = PlanningProblem::new(s, cfg)?;
    let w = CostWeights::hand_tuned();
    let gt = hindsight_of(&problem, &Prediction::GroundTruth, &w, cfg)?;
    let none = hindsight_of(&problem, &Prediction::Ignore, &w, cfg)?;
    Ok(gt < none)
}
