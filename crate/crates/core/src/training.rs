//! Losses, gradient assembly, the optimizer loop and open-loop evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller;
use crate::cost::{self, AgentFuture, CostContext, CostWeights, Vec6, NUM_TERMS};
use crate::dynamics::{State, Trajectory};
use crate::error::{Error, Result};
use crate::planner::{self, Setting};
use crate::predictor::{self, AgentHistory, PredictionUpstream, PredictorParams, PredictorShape};
use crate::scenario::Scenario;
use crate::stack::{self, Ablation, PlanningProblem, Prediction, StackConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_MODES: usize = 4;
/// Floor on the agent distance used by distance weighting (m).
pub const DISTANCE_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Standard,
    DistanceWeighted,
    GradcostWeighted,
    Diffstack,
    DiffstackNoPred,
    CostTuning,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::Standard,
        TrainMode::DistanceWeighted,
        TrainMode::GradcostWeighted,
        TrainMode::Diffstack,
        TrainMode::DiffstackNoPred,
        TrainMode::CostTuning,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::DistanceWeighted => "distance_weighted",
            TrainMode::GradcostWeighted => "gradcost_weighted",
            TrainMode::Diffstack => "diffstack",
            TrainMode::DiffstackNoPred => "diffstack_no_pred",
            TrainMode::CostTuning => "cost_tuning",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        TrainMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown train mode '{s}'")))
    }

    pub fn default_alphas(&self, setting: Setting) -> [f64; 3] {
        let downstream = match setting {
            Setting::Rl => [100.0, 1000.0],
            Setting::Il => [10.0, 1000.0],
        };
        match self {
            TrainMode::Standard | TrainMode::DistanceWeighted | TrainMode::GradcostWeighted => [1.0, 0.0, 0.0],
            TrainMode::Diffstack => [1.0, downstream[0], downstream[1]],
            TrainMode::DiffstackNoPred | TrainMode::CostTuning => [0.0, downstream[0], downstream[1]],
        }
    }

    fn trains_cost(&self) -> bool {
        matches!(self, TrainMode::CostTuning)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub setting: Setting,
}

impl LossConfig {
    pub fn new(alphas: [f64; 3], setting: Setting) -> Result<Self> {
        let c = LossConfig { alpha1: alphas[0], alpha2: alphas[1], alpha3: alphas[2], setting };
        c.validate()?;
        Ok(c)
    }

    pub fn defaults(setting: Setting) -> Self {
        LossConfig::new(TrainMode::Diffstack.default_alphas(setting), setting).expect("positive defaults")
    }

    pub fn validate(&self) -> Result<()> {
        let a = [self.alpha1, self.alpha2, self.alpha3];
        if a.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || a.iter().all(|x| *x == 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative with at least one positive, got {a:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub modes: usize,
    /// Offset (m) added to prediction targets along `bias_direction`.
    pub bias_offset: f64,
    /// Offset direction in the ego frame (x forward, y left).
    pub bias_direction: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.003,
            clip_norm: 10.0,
            seed: 0,
            mode: TrainMode::Standard,
            modes: DEFAULT_MODES,
            bias_offset: 0.0,
            bias_direction: [1.0, 0.0],
        }
    }
}

impl TrainConfig {
    /// Ego-frame target offset with length `bias_offset`.
    pub fn bias_vector(&self) -> [f64; 2] {
        let [x, y] = self.bias_direction;
        let n = x.hypot(y);
        [self.bias_offset * x / n, self.bias_offset * y / n]
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.modes == 0 {
            return Err(Error::Config("epochs, batch size and modes must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_norm > 0.0) || !self.bias_offset.is_finite()
            || !self.bias_direction.iter().all(|v| v.is_finite())
            || self.bias_direction == [0.0, 0.0]
        {
            return Err(Error::Config("learning rate must be non-negative and the clip norm positive".into()));
        }
        Ok(())
    }
}

/// Hindsight cost: the control cost against logged futures with fixed
/// weights.
pub fn hindsight_cost(traj: &Trajectory, gt_futures: &[AgentFuture], goal: State, lane: &crate::lanegeo::Lane, fixed: &CostWeights) -> Result<f64> {
    cost::evaluate(traj, &CostContext::new(gt_futures, goal, lane), fixed)
}

/// Sum over `t = 1..=T` of the squared 2D distance to the logged ego.
pub fn il_loss(traj: &Trajectory, gt_ego: &Trajectory) -> f64 {
    traj.states.iter().zip(&gt_ego.states).skip(1).map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sum()
}

fn il_stage_gradients(traj: &Trajectory, gt_ego: &Trajectory) -> Vec<Vec6> {
    let mut g = vec![Vec6::zeros(); traj.states.len()];
    for t in 1..traj.states.len() {
        g[t][0] = 2.0 * (traj.states[t].x - gt_ego.states[t].x);
        g[t][1] = 2.0 * (traj.states[t].y - gt_ego.states[t].y);
    }
    g
}

/// One scenario prepared for training or evaluation.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub scenario: &'a Scenario,
    pub problem: PlanningProblem,
    pub histories: Vec<AgentHistory>,
    pub target: usize,
    /// Logged future of the predicted agent.
    pub gt: Vec<[f64; 2]>,
    /// Prediction target, possibly offset.
    pub nll_target: Vec<[f64; 2]>,
}

impl<'a> Sample<'a> {
    /// `bias` is an ego-frame offset applied to the prediction target.
    pub fn new(s: &'a Scenario, cfg: &StackConfig, bias: [f64; 2]) -> Result<Self> {
        let problem = PlanningProblem::new(s, cfg)?;
        let gt = s.predicted().future_positions(0, s.horizon_steps);
        let (sin, cos) = s.ego().current().heading.sin_cos();
        let shift = [cos * bias[0] - sin * bias[1], sin * bias[0] + cos * bias[1]];
        let nll_target = gt.iter().map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect();
        Ok(Sample { scenario: s, problem, histories: s.histories(), target: s.predicted_index(), gt, nll_target })
    }
}

/// Prepares samples, returning the ids of scenarios that cannot be planned.
pub fn prepare<'a>(scenarios: &'a [Scenario], cfg: &StackConfig, bias: [f64; 2]) -> Result<(Vec<Sample<'a>>, Vec<String>)> {
    let mut samples = Vec::with_capacity(scenarios.len());
    let mut skipped = Vec::new();
    for s in scenarios {
        match Sample::new(s, cfg, bias) {
            Ok(x) => samples.push(x),
            Err(Error::Rejected(_)) => skipped.push(s.id.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok((samples, skipped))
}

/// Loss components and metrics of one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioLosses {
    pub nll: f64,
    pub ade: f64,
    pub plan: f64,
    pub hindsight_cost: f64,
    pub mse: f64,
    /// `L_ctr` of the configured setting.
    pub ctr: f64,
    pub total: f64,
    pub ctr_skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub theta: Vec<f64>,
    pub dpsi: [f64; NUM_TERMS],
    pub dalpha: f64,
}

impl Grads {
    pub fn zeros(n: usize) -> Self {
        Grads { theta: vec![0.0; n], dpsi: [0.0; NUM_TERMS], dalpha: 0.0 }
    }

    fn add_scaled(&mut self, o: &Grads, s: f64) {
        self.theta.iter_mut().zip(&o.theta).for_each(|(a, b)| *a += s * b);
        for i in 0..NUM_TERMS {
            self.dpsi[i] += s * o.dpsi[i];
        }
        self.dalpha += s * o.dalpha;
    }
}

/// Forward pass through predictor, planner and controller, then the total
/// loss `a1 * nll_scale * L_pred + a2 * L_plan + a3 * L_ctr` and its
/// gradients in the predictor parameters and cost parameters.
pub fn total_loss_and_grads(
    sample: &Sample,
    params: &PredictorParams,
    w: &CostWeights,
    loss: &LossConfig,
    cfg: &StackConfig,
    nll_scale: f64,
) -> Result<(ScenarioLosses, Grads)> {
    let s = sample.scenario;
    let pred = predictor::predict(&sample.histories, sample.target, params, s.dt)?;
    let (nll_biased, up_nll) = predictor::nll_with_grad(&pred, &sample.nll_target)?;
    let nll = if sample.nll_target == sample.gt { nll_biased } else { predictor::nll(&pred, &sample.gt)? };
    let ade = predictor::ade(&pred, &sample.gt)?;
    let problem = &sample.problem;
    let agents = problem.agents(&Prediction::from_model(&pred));
    let out = stack::run(problem, &agents, w, cfg)?;
    let ctx = problem.plan_context(&agents, cfg.cost);
    let mut upstream = PredictionUpstream::zeros(pred.num_modes(), pred.horizon());
    upstream.add_scaled(&up_nll, loss.alpha1 * nll_scale);
    let mut dw = [0.0; NUM_TERMS];

    let mut plan = 0.0;
    if let Some(set) = &out.plan {
        let target = match loss.setting {
            Setting::Rl => problem.rl_target,
            Setting::Il => problem.il_target,
        };
        let (ce, dce) = planner::planning_loss(set, target)?;
        plan = ce;
        if loss.alpha2 > 0.0 && cfg.ablation == Ablation::Full {
            let (dw_plan, preds) = planner::cost_backward(set, &ctx, w, &dce)?;
            for i in 0..NUM_TERMS {
                dw[i] += loss.alpha2 * dw_plan[i];
            }
            upstream.add_cost_grads(&preds[0], loss.alpha2);
        }
    }

    let hindsight = problem.hindsight_agents();
    let hctx = problem.plan_context(&hindsight, cfg.cost).cost_ctx(out.lane);
    let fixed = CostWeights::hand_tuned();
    let hc = cost::evaluate(&out.ego_trajectory, &hctx, &fixed)?;
    let mse = il_loss(&out.ego_trajectory, &problem.gt_ego);
    let ctr = match loss.setting {
        Setting::Rl => hc,
        Setting::Il => mse,
    };
    let mut ctr_skipped = false;
    if let Some(sol) = &out.control {
        if loss.alpha3 > 0.0 {
            let dl_dtau = match loss.setting {
                Setting::Rl => cost::stage_gradients(&out.ego_trajectory, &hctx, &fixed)?,
                Setting::Il => il_stage_gradients(&out.ego_trajectory, &problem.gt_ego),
            };
            let g = controller::backward(sol, &ctx.cost_ctx(out.lane), w, &dl_dtau)?;
            ctr_skipped = g.skipped;
            for i in 0..NUM_TERMS {
                dw[i] += loss.alpha3 * g.dw[i];
            }
            upstream.add_cost_grads(&g.predictions[0], loss.alpha3);
        }
    }
    let mut grads = Grads::zeros(params.theta.len());
    predictor::accumulate_grads(&pred, params, &upstream, &mut grads.theta)?;
    let (dpsi, dalpha) = w.chain(&dw);
    grads.dpsi = dpsi;
    grads.dalpha = dalpha;
    let total = loss.alpha1 * nll_scale * nll_biased + loss.alpha2 * plan + loss.alpha3 * ctr;
    Ok((ScenarioLosses { nll, ade, plan, hindsight_cost: hc, mse, ctr, total, ctr_skipped }, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reweighting {
    Distance,
    Gradcost,
}

/// Unnormalized relevance of the predicted agent.
pub fn relevance(sample: &Sample, variant: Reweighting) -> Result<f64> {
    let ego = &sample.problem.gt_ego;
    match variant {
        Reweighting::Distance => {
            let n = sample.gt.len();
            let mean = (0..n).map(|t| {
                let e = ego.states[t + 1].pos();
                (e[0] - sample.gt[t][0]).hypot(e[1] - sample.gt[t][1])
            }).sum::<f64>() / n as f64;
            Ok(1.0 / mean.max(DISTANCE_EPS))
        }
        Reweighting::Gradcost => {
            let p = &sample.problem;
            let agents = p.agents(&Prediction::Mixture(AgentFuture::predicted(vec![sample.gt.clone()], vec![1.0])));
            let ctx = p.plan_context(&agents, Default::default()).cost_ctx(p.reference_lane);
            let g = cost::grad_predictions(ego, &ctx, &CostWeights::hand_tuned())?;
            Ok(g[0].means_norm())
        }
    }
}

/// NLL scaled by the raw relevance weight.
pub fn reweighted_pred_loss(sample: &Sample, params: &PredictorParams, variant: Reweighting) -> Result<f64> {
    let pred = predictor::predict(&sample.histories, sample.target, params, sample.scenario.dt)?;
    Ok(relevance(sample, variant)? * predictor::nll(&pred, &sample.nll_target)?)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Scales `g` down to global norm `max`; returns the norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max: f64) -> f64 {
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > max {
        g.iter_mut().for_each(|x| *x *= max / n);
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: TrainMode,
    pub seed: u64,
    pub bias_offset: f64,
    pub config_hash: String,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub predictor: PredictorParams,
    pub weights: CostWeights,
}

impl Checkpoint {
    pub fn label(&self) -> String {
        if self.bias_offset != 0.0 {
            format!("{}-biased", self.mode.name())
        } else {
            self.mode.name().to_string()
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Schema(format!("checkpoint {}: {e}", path.display())))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("checkpoint version {} unsupported", c.version)));
        }
        Ok(c)
    }
}

/// Hex SHA-256 of the JSON form of a value.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Aggregate losses over a set of samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MeanLosses {
    pub nll: f64,
    pub ade: f64,
    pub plan: f64,
    pub hindsight_cost: f64,
    pub mse: f64,
    pub total: f64,
    pub ctr_skipped: usize,
    pub count: usize,
}

impl MeanLosses {
    fn add(&mut self, l: &ScenarioLosses) {
        self.nll += l.nll;
        self.ade += l.ade;
        self.plan += l.plan;
        self.hindsight_cost += l.hindsight_cost;
        self.mse += l.mse;
        self.total += l.total;
        self.ctr_skipped += l.ctr_skipped as usize;
        self.count += 1;
    }

    fn finish(mut self) -> Self {
        let n = self.count.max(1) as f64;
        for x in [&mut self.nll, &mut self.ade, &mut self.plan, &mut self.hindsight_cost, &mut self.mse, &mut self.total] {
            *x /= n;
        }
        self
    }
}

pub fn evaluate_samples(samples: &[Sample], params: &PredictorParams, w: &CostWeights, loss: &LossConfig, cfg: &StackConfig) -> Result<MeanLosses> {
    let mut m = MeanLosses::default();
    for s in samples {
        m.add(&total_loss_and_grads(s, params, w, loss, cfg, 1.0)?.0);
    }
    Ok(m.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: MeanLosses,
    pub val: MeanLosses,
    pub max_grad_norm: f64,
    pub psi: [f64; NUM_TERMS],
    pub alpha: f64,
}

/// Starting point of a run.
#[derive(Debug, Clone)]
pub struct TrainInit {
    pub predictor: Option<PredictorParams>,
    pub weights: CostWeights,
}

impl Default for TrainInit {
    fn default() -> Self {
        TrainInit { predictor: None, weights: CostWeights::hand_tuned() }
    }
}

/// Scales each of `psi_2..5` by `1 + fraction` or `1 - fraction`, signs drawn
/// from `seed`; `psi_1` and `alpha` are kept.
pub fn perturb_psi(w: &CostWeights, fraction: f64, seed: u64) -> Result<CostWeights> {
    use rand::Rng;
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("perturbation fraction must lie in [0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psi = w.psi();
    for p in psi.iter_mut().skip(1) {
        *p *= if rng.gen_bool(0.5) { 1.0 + fraction } else { 1.0 - fraction };
    }
    w.with_params(psi, w.alpha())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub skipped_train: Vec<String>,
    pub skipped_val: Vec<String>,
}

/// Parameters updated by the optimizer: predictor weights, or `psi_2..5`
/// and `alpha` when tuning the cost.
fn learnable(mode: TrainMode, params: &PredictorParams, w: &CostWeights) -> Vec<f64> {
    if mode.trains_cost() {
        let mut v = w.psi()[1..].to_vec();
        v.push(w.alpha());
        v
    } else {
        params.theta.clone()
    }
}

fn flat_grad(mode: TrainMode, g: &Grads) -> Vec<f64> {
    if mode.trains_cost() {
        let mut v = g.dpsi[1..].to_vec();
        v.push(g.dalpha);
        v
    } else {
        g.theta.clone()
    }
}

fn write_back(mode: TrainMode, x: &[f64], params: &mut PredictorParams, w: &mut CostWeights) -> Result<()> {
    if mode.trains_cost() {
        let mut psi = w.psi();
        psi[1..].copy_from_slice(&x[..NUM_TERMS - 1]);
        *w = w.with_params(psi, x[NUM_TERMS - 1].max(1e-6))?;
    } else {
        params.theta.copy_from_slice(x);
    }
    Ok(())
}

pub fn train(
    train_set: &[Scenario],
    val_set: &[Scenario],
    cfg: &TrainConfig,
    loss: &LossConfig,
    stack_cfg: &StackConfig,
    init: TrainInit,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    loss.validate()?;
    let first = train_set.first().ok_or_else(|| Error::Config("empty training set".into()))?;
    let shape = PredictorShape::new(cfg.modes, first.past_steps + 1, first.horizon_steps);
    let mut params = match init.predictor {
        Some(p) => p,
        None => PredictorParams::init(shape, cfg.seed)?,
    };
    if params.shape != shape {
        return Err(Error::Shape(format!("predictor shape {:?} does not match the data {:?}", params.shape, shape)));
    }
    let mut weights = init.weights;
    let (train_samples, skipped_train) = prepare(train_set, stack_cfg, cfg.bias_vector())?;
    let (val_samples, skipped_val) = prepare(val_set, stack_cfg, [0.0; 2])?;
    if train_samples.is_empty() {
        return Err(Error::Rejected("no plannable training scenarios".into()));
    }
    let relevance_of: Vec<f64> = match cfg.mode {
        TrainMode::DistanceWeighted => train_samples.iter().map(|s| relevance(s, Reweighting::Distance)).collect::<Result<_>>()?,
        TrainMode::GradcostWeighted => train_samples.iter().map(|s| relevance(s, Reweighting::Gradcost)).collect::<Result<_>>()?,
        _ => vec![1.0; train_samples.len()],
    };

    let mut x = learnable(cfg.mode, &params, &weights);
    let mut adam = Adam::new(x.len(), cfg.learning_rate);
    let mut report = TrainReport { epochs: Vec::new(), skipped_train, skipped_val };
    let eval = |p: &PredictorParams, w: &CostWeights| evaluate_samples(&val_samples, p, w, loss, stack_cfg);

    let log0 = EpochLog { epoch: 0, train: MeanLosses::default(), val: eval(&params, &weights)?, max_grad_norm: 0.0, psi: weights.psi(), alpha: weights.alpha() };
    on_epoch(&log0);
    report.epochs.push(log0);

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut train_losses = MeanLosses::default();
        let mut max_norm: f64 = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mean_rel = batch.iter().map(|&i| relevance_of[i]).sum::<f64>() / batch.len() as f64;
            let mut acc = Grads::zeros(params.theta.len());
            for &i in batch {
                let scale = if mean_rel > 0.0 { relevance_of[i] / mean_rel } else { 1.0 };
                let sample = &train_samples[i];
                let (l, g) = total_loss_and_grads(sample, &params, &weights, loss, stack_cfg, scale)?;
                if !l.total.is_finite() || !g.theta.iter().all(|v| v.is_finite()) {
                    return Err(Error::Diverged { scenario: sample.scenario.id.clone(), reason: format!("non-finite loss {}", l.total) });
                }
                train_losses.add(&l);
                acc.add_scaled(&g, 1.0 / batch.len() as f64);
            }
            let mut g = flat_grad(cfg.mode, &acc);
            max_norm = max_norm.max(clip_global_norm(&mut g, cfg.clip_norm));
            adam.step(&mut x, &g);
            write_back(cfg.mode, &x, &mut params, &mut weights)?;
        }
        let log = EpochLog {
            epoch,
            train: train_losses.finish(),
            val: eval(&params, &weights)?,
            max_grad_norm: max_norm,
            psi: weights.psi(),
            alpha: weights.alpha(),
        };
        on_epoch(&log);
        report.epochs.push(log);
    }
    let hash = config_hash(&(cfg, loss, stack_cfg))?;
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        mode: cfg.mode,
        seed: cfg.seed,
        bias_offset: cfg.bias_offset,
        config_hash: hash,
        train: cfg.clone(),
        loss: *loss,
        predictor: params,
        weights,
    };
    Ok((ckpt, report))
}

// ---------------------------------------------------------------------------
// Open-loop evaluation

/// What to evaluate.
#[derive(Debug, Clone)]
pub enum EvalRun<'a> {
    NoPrediction,
    GroundTruth,
    Model(&'a Checkpoint),
}

impl EvalRun<'_> {
    pub fn label(&self) -> String {
        match self {
            EvalRun::NoPrediction => "no_prediction".into(),
            EvalRun::GroundTruth => "gt_prediction".into(),
            EvalRun::Model(c) => c.label(),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            EvalRun::Model(c) => Some(c.seed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub run: String,
    pub seed: Option<u64>,
    pub scenario: String,
    /// `None` for the baselines, which do not predict.
    pub ade: Option<f64>,
    pub nll: Option<f64>,
    pub plan_loss: f64,
    pub hindsight_cost: f64,
    pub mse: f64,
}

pub const OPEN_LOOP_METRICS: [&str; 3] = ["plan_loss", "hindsight_cost", "mse"];

impl EvalRecord {
    fn metrics(&self) -> [f64; 3] {
        [self.plan_loss, self.hindsight_cost, self.mse]
    }
}

/// Per-run means and their differences to the No-prediction baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunAggregate {
    pub run: String,
    pub seed: Option<u64>,
    pub ade: Option<f64>,
    pub nll: Option<f64>,
    pub absolute: [f64; 3],
    pub relative: [f64; 3],
}

/// Runs grouped by label: mean and standard error over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAggregate {
    pub run: String,
    pub seeds: usize,
    pub relative: [f64; 3],
    pub relative_se: [f64; 3],
    pub absolute: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenLoopReport {
    pub records: Vec<EvalRecord>,
    pub runs: Vec<RunAggregate>,
    pub groups: Vec<GroupAggregate>,
    pub skipped: Vec<String>,
}

impl OpenLoopReport {
    pub fn group(&self, run: &str) -> Option<&GroupAggregate> {
        self.groups.iter().find(|g| g.run == run)
    }
}

pub fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Evaluates one sample under a run.
pub fn evaluate_sample(sample: &Sample, run: &EvalRun, setting: Setting, cfg: &StackConfig) -> Result<EvalRecord> {
    let loss = LossConfig { alpha1: 1.0, alpha2: 1.0, alpha3: 1.0, setting };
    let (ade, nll, plan, hc, mse) = match run {
        EvalRun::Model(c) => {
            let (l, _) = total_loss_and_grads(sample, &c.predictor, &c.weights, &loss, cfg, 1.0)?;
            (Some(l.ade), Some(l.nll), l.plan, l.hindsight_cost, l.mse)
        }
        baseline => {
            let p = &sample.problem;
            let prediction = if matches!(baseline, EvalRun::GroundTruth) { Prediction::GroundTruth } else { Prediction::Ignore };
            let w = CostWeights::hand_tuned();
            let out = stack::run(p, &p.agents(&prediction), &w, cfg)?;
            let plan = match &out.plan {
                Some(set) => {
                    let target = if setting == Setting::Rl { p.rl_target } else { p.il_target };
                    planner::planning_loss(set, target)?.0
                }
                None => 0.0,
            };
            let hc = p.hindsight_cost(&out.ego_trajectory, out.lane, cfg.cost)?;
            (None, None, plan, hc, il_loss(&out.ego_trajectory, &p.gt_ego))
        }
    };
    Ok(EvalRecord { run: run.label(), seed: run.seed(), scenario: sample.scenario.id.clone(), ade, nll, plan_loss: plan, hindsight_cost: hc, mse })
}

/// Baselines plus every checkpoint on the same scenarios.
pub fn evaluate_open_loop(scenarios: &[Scenario], checkpoints: &[Checkpoint], setting: Setting, cfg: &StackConfig) -> Result<OpenLoopReport> {
    let (samples, skipped) = prepare(scenarios, cfg, [0.0; 2])?;
    let mut runs = vec![EvalRun::NoPrediction, EvalRun::GroundTruth];
    runs.extend(checkpoints.iter().map(EvalRun::Model));
    let mut records = Vec::new();
    let mut aggregates = Vec::new();
    let mut baseline = [0.0; 3];
    for run in &runs {
        let recs = samples.iter().map(|s| evaluate_sample(s, run, setting, cfg)).collect::<Result<Vec<_>>>()?;
        let n = recs.len().max(1) as f64;
        let mut absolute = [0.0; 3];
        for r in &recs {
            for (a, m) in absolute.iter_mut().zip(r.metrics()) {
                *a += m / n;
            }
        }
        if matches!(run, EvalRun::NoPrediction) {
            baseline = absolute;
        }
        let mean_opt = |f: fn(&EvalRecord) -> Option<f64>| recs.iter().map(f).sum::<Option<f64>>().map(|s| s / n);
        let relative = [0, 1, 2].map(|i| if matches!(run, EvalRun::NoPrediction) { 0.0 } else { absolute[i] - baseline[i] });
        aggregates.push(RunAggregate { run: run.label(), seed: run.seed(), ade: mean_opt(|r| r.ade), nll: mean_opt(|r| r.nll), absolute, relative });
        records.extend(recs);
    }
    let mut labels: Vec<String> = Vec::new();
    for a in &aggregates {
        if !labels.contains(&a.run) {
            labels.push(a.run.clone());
        }
    }
    let groups = labels
        .into_iter()
        .map(|label| {
            let members: Vec<&RunAggregate> = aggregates.iter().filter(|a| a.run == label).collect();
            let stat = |f: &dyn Fn(&RunAggregate) -> f64| mean_and_se(&members.iter().map(|a| f(a)).collect::<Vec<_>>());
            let rel = [0, 1, 2].map(|i| stat(&|a| a.relative[i]));
            let abs = [0, 1, 2].map(|i| stat(&|a| a.absolute[i]).0);
            GroupAggregate { run: label, seeds: members.len(), relative: rel.map(|r| r.0), relative_se: rel.map(|r| r.1), absolute: abs }
        })
        .collect();
    Ok(OpenLoopReport { records, runs: aggregates, groups, skipped })
}
