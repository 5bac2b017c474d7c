//! Five-term planning and control cost.
//!
//! `c = w1*coll + w2*goal + w3*lane_lat + w4*lane_ang + w5*effort`, where the
//! collision term is a Gaussian RBF of the mode-probability-weighted squared
//! distance to each agent. The weights are reparameterized as
//! `w_i = alpha * c_norm * softmax(psi)_i` so they always sum to
//! `alpha * c_norm`.
//!
//! Time alignment: for a trajectory with states `0..=T` and controls `0..T`,
//! state terms act on states `1..=T` (agent futures are indexed `0..T` for
//! times `1..=T`) and the effort term acts on every control.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, Control, State, Trajectory};
use crate::error::{Error, Result};
use crate::lanegeo::Lane;

pub const NUM_TERMS: usize = 5;
pub const COLLISION: usize = 0;
pub const GOAL: usize = 1;
pub const LANE_LAT: usize = 2;
pub const LANE_ANG: usize = 3;
pub const EFFORT: usize = 4;

pub const TERM_NAMES: [&str; NUM_TERMS] = ["collision", "goal", "lane_lat", "lane_ang", "effort"];

/// Hand-tuned default weights.
pub const DEFAULT_WEIGHTS: [f64; NUM_TERMS] = [5.0, 0.5, 0.3, 0.3, 1.0];

pub type Vec6 = SVector<f64, 6>;
pub type Mat6 = SMatrix<f64, 6, 6>;

/// Tunables of the cost that are not trained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// RBF bandwidth in meters.
    pub sigma: f64,
    /// Diagonal damping added to the state block of every quadratized stage.
    pub damping: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams { sigma: 1.5, damping: 1e-3 }
    }
}

/// Cost weights with their trainable reparameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct CostWeights {
    psi: [f64; NUM_TERMS],
    alpha: f64,
    c_norm: f64,
    w: [f64; NUM_TERMS],
    softmax: [f64; NUM_TERMS],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawWeights {
    psi: [f64; NUM_TERMS],
    alpha: f64,
    c_norm: f64,
    /// Stored so that exact weights survive a round trip.
    weights: [f64; NUM_TERMS],
}

impl TryFrom<RawWeights> for CostWeights {
    type Error = Error;
    fn try_from(r: RawWeights) -> Result<Self> {
        let mut out = weights_from_params(r.psi, r.alpha, r.c_norm)?;
        if out.w.iter().zip(&r.weights).any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(1.0)) {
            return Err(Error::domain("stored weights disagree with psi, alpha and c_norm"));
        }
        out.w = r.weights;
        Ok(out)
    }
}

impl From<CostWeights> for RawWeights {
    fn from(w: CostWeights) -> Self {
        RawWeights { psi: w.psi, alpha: w.alpha, c_norm: w.c_norm, weights: w.w }
    }
}

/// Builds weights `w_i = alpha * c_norm * exp(psi_i) / sum_j exp(psi_j)`.
pub fn weights_from_params(psi: [f64; NUM_TERMS], alpha: f64, c_norm: f64) -> Result<CostWeights> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
    }
    if !(c_norm > 0.0) || !c_norm.is_finite() {
        return Err(Error::domain(format!("c_norm must be positive, got {c_norm}")));
    }
    if psi.iter().any(|p| !p.is_finite()) {
        return Err(Error::domain("non-finite psi"));
    }
    let max = psi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = psi.iter().map(|p| (p - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut softmax = [0.0; NUM_TERMS];
    let mut w = [0.0; NUM_TERMS];
    for i in 0..NUM_TERMS {
        softmax[i] = e[i] / z;
        w[i] = alpha * c_norm * softmax[i];
    }
    Ok(CostWeights { psi, alpha, c_norm, w, softmax })
}

impl CostWeights {
    /// Parameters that reproduce `weights` with `alpha = 1`.
    pub fn from_weights(weights: [f64; NUM_TERMS]) -> Result<Self> {
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::domain("weights must be positive"));
        }
        let c_norm: f64 = weights.iter().sum();
        let psi = weights.map(|w| (w / c_norm).ln());
        let mut out = weights_from_params(psi, 1.0, c_norm)?;
        // the softmax of log-weights recovers them up to rounding; keep the
        // requested values exactly
        out.w = weights;
        Ok(out)
    }

    pub fn hand_tuned() -> Self {
        CostWeights::from_weights(DEFAULT_WEIGHTS).expect("default weights are positive")
    }

    pub fn weights(&self) -> [f64; NUM_TERMS] {
        self.w
    }

    pub fn psi(&self) -> [f64; NUM_TERMS] {
        self.psi
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn c_norm(&self) -> f64 {
        self.c_norm
    }

    /// Normalized weights `w_i / alpha`.
    pub fn normalized(&self) -> [f64; NUM_TERMS] {
        self.softmax.map(|s| s * self.c_norm)
    }

    pub fn with_params(&self, psi: [f64; NUM_TERMS], alpha: f64) -> Result<Self> {
        weights_from_params(psi, alpha, self.c_norm)
    }

    /// Chains `dc/dw` into `(dc/dpsi, dc/dalpha)`.
    pub fn chain(&self, dc_dw: &[f64; NUM_TERMS]) -> ([f64; NUM_TERMS], f64) {
        let total: f64 = (0..NUM_TERMS).map(|i| dc_dw[i] * self.w[i]).sum();
        let mut dpsi = [0.0; NUM_TERMS];
        for j in 0..NUM_TERMS {
            dpsi[j] = self.w[j] * dc_dw[j] - self.softmax[j] * total;
        }
        (dpsi, total / self.alpha)
    }
}

/// Future of one non-ego agent as seen by the cost: a mixture of position
/// sequences. Logged futures are a single mode with probability one.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFuture {
    pub modes: Vec<Vec<[f64; 2]>>,
    pub probs: Vec<f64>,
    pub predicted: bool,
}

impl AgentFuture {
    pub fn logged(positions: Vec<[f64; 2]>) -> Self {
        AgentFuture { modes: vec![positions], probs: vec![1.0], predicted: false }
    }

    pub fn predicted(modes: Vec<Vec<[f64; 2]>>, probs: Vec<f64>) -> Self {
        AgentFuture { modes, probs, predicted: true }
    }

    pub fn horizon(&self) -> usize {
        self.modes.first().map(|m| m.len()).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CostContext<'a> {
    pub agents: &'a [AgentFuture],
    pub goal: State,
    pub lane: &'a Lane,
    pub params: CostParams,
}

impl<'a> CostContext<'a> {
    pub fn new(agents: &'a [AgentFuture], goal: State, lane: &'a Lane) -> Self {
        CostContext { agents, goal, lane, params: CostParams::default() }
    }

    pub fn with_lane(&self, lane: &'a Lane) -> Self {
        CostContext { lane, ..*self }
    }

    fn check(&self, traj: &Trajectory) -> Result<()> {
        let t = traj.horizon();
        if traj.states.len() != t + 1 {
            return Err(Error::Shape("trajectory needs one more state than controls".into()));
        }
        for a in self.agents {
            if a.modes.is_empty() || a.modes.len() != a.probs.len() {
                return Err(Error::Shape("agent future: modes and probabilities disagree".into()));
            }
            for m in &a.modes {
                if m.len() != t {
                    return Err(Error::HorizonMismatch { expected: t, got: m.len() });
                }
            }
        }
        Ok(())
    }
}

/// Per-stage gradient and Gauss-Newton Hessian over `state (4) ++ control (2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCostSlice {
    pub grad: Vec6,
    pub hess: Mat6,
}

#[inline]
fn rbf(z: f64, sigma: f64) -> f64 {
    (-z / (2.0 * sigma * sigma)).exp()
}

/// Collision quantities for one agent at one position.
struct CollisionPoint {
    r: f64,
    /// `G = 2 * sum_k pi_k (p - s_k)`, the gradient of `z` in `p`.
    g: [f64; 2],
}

fn collision_at(p: [f64; 2], agent: &AgentFuture, t: usize, sigma: f64) -> CollisionPoint {
    let mut z = 0.0;
    let mut g = [0.0; 2];
    for (mode, &pi) in agent.modes.iter().zip(&agent.probs) {
        let d = [p[0] - mode[t][0], p[1] - mode[t][1]];
        z += pi * (d[0] * d[0] + d[1] * d[1]);
        g[0] += 2.0 * pi * d[0];
        g[1] += 2.0 * pi * d[1];
    }
    CollisionPoint { r: rbf(z, sigma), g }
}

/// Unweighted term values. Weighted cost is their dot product with the weights.
pub fn terms(traj: &Trajectory, ctx: &CostContext) -> Result<[f64; NUM_TERMS]> {
    ctx.check(traj)?;
    Ok(terms_unchecked(traj, ctx))
}

pub(crate) fn terms_unchecked(traj: &Trajectory, ctx: &CostContext) -> [f64; NUM_TERMS] {
    let mut out = [0.0; NUM_TERMS];
    let big_t = traj.horizon();
    for t in 1..=big_t {
        let s = &traj.states[t];
        let st = state_terms(s, ctx.agents, t - 1, ctx.lane, ctx.params.sigma);
        for i in 0..NUM_TERMS {
            out[i] += st[i];
        }
    }
    let terminal = traj.terminal();
    out[GOAL] = (terminal.x - ctx.goal.x).powi(2) + (terminal.y - ctx.goal.y).powi(2);
    for u in &traj.controls {
        out[EFFORT] += u.heading_rate * u.heading_rate + u.accel * u.accel;
    }
    out
}

/// Collision and lane terms of one state against agents at future index `t`.
fn state_terms(s: &State, agents: &[AgentFuture], t: usize, lane: &Lane, sigma: f64) -> [f64; NUM_TERMS] {
    let mut out = [0.0; NUM_TERMS];
    let p = s.pos();
    for a in agents {
        out[COLLISION] += collision_at(p, a, t, sigma).r;
    }
    let proj = lane.project(p);
    out[LANE_LAT] = proj.signed_lateral_offset * proj.signed_lateral_offset;
    out[LANE_ANG] = wrap_angle(s.heading - proj.lane_heading).powi(2);
    out
}

/// Terms of a single closed-loop step: collision against agents at their
/// current positions, lane terms of `state`, effort of `control`. No goal term.
pub fn step_terms(state: &State, control: &Control, agent_positions: &[[f64; 2]], lane: &Lane, params: &CostParams) -> [f64; NUM_TERMS] {
    let agents: Vec<AgentFuture> = agent_positions.iter().map(|p| AgentFuture::logged(vec![*p])).collect();
    let mut out = state_terms(state, &agents, 0, lane, params.sigma);
    out[EFFORT] = control.heading_rate.powi(2) + control.accel.powi(2);
    out
}

pub fn evaluate(traj: &Trajectory, ctx: &CostContext, w: &CostWeights) -> Result<f64> {
    let t = terms(traj, ctx)?;
    Ok(dot(&t, &w.weights()))
}

pub(crate) fn evaluate_unchecked(traj: &Trajectory, ctx: &CostContext, w: &CostWeights) -> f64 {
    dot(&terms_unchecked(traj, ctx), &w.weights())
}

fn dot(a: &[f64; NUM_TERMS], b: &[f64; NUM_TERMS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-term gradient and Gauss-Newton Hessian at one stage (no damping).
#[derive(Debug, Clone)]
pub struct TermSlices {
    pub grad: [Vec6; NUM_TERMS],
    pub hess: [Mat6; NUM_TERMS],
}

impl TermSlices {
    fn zero() -> Self {
        TermSlices { grad: [Vec6::zeros(); NUM_TERMS], hess: [Mat6::zeros(); NUM_TERMS] }
    }
}

/// Per-stage, per-term derivatives for stages `0..=T`.
pub fn term_slices(traj: &Trajectory, ctx: &CostContext) -> Result<Vec<TermSlices>> {
    ctx.check(traj)?;
    Ok(term_slices_unchecked(traj, ctx))
}

pub(crate) fn term_slices_unchecked(traj: &Trajectory, ctx: &CostContext) -> Vec<TermSlices> {
    let big_t = traj.horizon();
    let sigma = ctx.params.sigma;
    let mut out = Vec::with_capacity(big_t + 1);
    for t in 0..=big_t {
        let mut sl = TermSlices::zero();
        if t >= 1 {
            let s = &traj.states[t];
            let p = s.pos();
            let (gc, hc) = (&mut sl.grad[COLLISION], &mut sl.hess[COLLISION]);
            for a in ctx.agents {
                let cp = collision_at(p, a, t - 1, sigma);
                let r1 = -cp.r / (2.0 * sigma * sigma);
                let r2 = cp.r / (4.0 * sigma.powi(4));
                gc[0] += r1 * cp.g[0];
                gc[1] += r1 * cp.g[1];
                for i in 0..2 {
                    for j in 0..2 {
                        hc[(i, j)] += r2 * cp.g[i] * cp.g[j];
                    }
                }
            }
            let proj = ctx.lane.project(p);
            let d = [p[0] - proj.closest_point[0], p[1] - proj.closest_point[1]];
            sl.grad[LANE_LAT][0] = 2.0 * d[0];
            sl.grad[LANE_LAT][1] = 2.0 * d[1];
            let n = [-proj.lane_heading.sin(), proj.lane_heading.cos()];
            for i in 0..2 {
                for j in 0..2 {
                    sl.hess[LANE_LAT][(i, j)] = 2.0 * n[i] * n[j];
                }
            }
            let e = wrap_angle(s.heading - proj.lane_heading);
            sl.grad[LANE_ANG][2] = 2.0 * e;
            sl.hess[LANE_ANG][(2, 2)] = 2.0;
            if t == big_t {
                sl.grad[GOAL][0] = 2.0 * (s.x - ctx.goal.x);
                sl.grad[GOAL][1] = 2.0 * (s.y - ctx.goal.y);
                sl.hess[GOAL][(0, 0)] = 2.0;
                sl.hess[GOAL][(1, 1)] = 2.0;
            }
        }
        if t < big_t {
            let u = &traj.controls[t];
            sl.grad[EFFORT][4] = 2.0 * u.heading_rate;
            sl.grad[EFFORT][5] = 2.0 * u.accel;
            sl.hess[EFFORT][(4, 4)] = 2.0;
            sl.hess[EFFORT][(5, 5)] = 2.0;
        }
        out.push(sl);
    }
    out
}

/// Weighted per-stage gradient and damped Gauss-Newton Hessian.
pub fn quadratize(traj: &Trajectory, ctx: &CostContext, w: &CostWeights) -> Result<Vec<QuadraticCostSlice>> {
    ctx.check(traj)?;
    Ok(combine_slices(&term_slices_unchecked(traj, ctx), w, ctx.params.damping))
}

pub(crate) fn combine_slices(slices: &[TermSlices], w: &CostWeights, damping: f64) -> Vec<QuadraticCostSlice> {
    let wv = w.weights();
    slices
        .iter()
        .enumerate()
        .map(|(t, sl)| {
            let mut grad = Vec6::zeros();
            let mut hess = Mat6::zeros();
            for i in 0..NUM_TERMS {
                grad += sl.grad[i] * wv[i];
                hess += sl.hess[i] * wv[i];
            }
            if t > 0 {
                for i in 0..4 {
                    hess[(i, i)] += damping;
                }
            }
            QuadraticCostSlice { grad, hess }
        })
        .collect()
}

/// `dc/dw_i`, which is the i-th unweighted term.
pub fn grad_weights(traj: &Trajectory, ctx: &CostContext) -> Result<[f64; NUM_TERMS]> {
    terms(traj, ctx)
}

/// `dc/dpsi` and `dc/dalpha` through the reparameterization.
pub fn grad_params(traj: &Trajectory, ctx: &CostContext, w: &CostWeights) -> Result<([f64; NUM_TERMS], f64)> {
    Ok(w.chain(&grad_weights(traj, ctx)?))
}

/// Gradient of the weighted collision term with respect to one agent's mode
/// positions (`K x T`) and mode probabilities (`K`).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrads {
    pub means: Vec<Vec<[f64; 2]>>,
    pub probs: Vec<f64>,
}

impl PredictionGrads {
    pub fn zeros(k: usize, t: usize) -> Self {
        PredictionGrads { means: vec![vec![[0.0; 2]; t]; k], probs: vec![0.0; k] }
    }

    pub fn zeros_like(a: &AgentFuture) -> Self {
        PredictionGrads::zeros(a.modes.len(), a.horizon())
    }

    pub fn add_scaled(&mut self, other: &PredictionGrads, scale: f64) {
        for (m, o) in self.means.iter_mut().zip(&other.means) {
            for (a, b) in m.iter_mut().zip(o) {
                a[0] += scale * b[0];
                a[1] += scale * b[1];
            }
        }
        for (a, b) in self.probs.iter_mut().zip(&other.probs) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for m in &self.means {
            for p in m {
                s += p[0] * p[0] + p[1] * p[1];
            }
        }
        s += self.probs.iter().map(|p| p * p).sum::<f64>();
        s.sqrt()
    }

    pub fn means_norm(&self) -> f64 {
        self.means.iter().flatten().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>().sqrt()
    }
}

/// One entry per agent in `ctx.agents`; logged agents get zeros.
pub fn grad_predictions(traj: &Trajectory, ctx: &CostContext, w: &CostWeights) -> Result<Vec<PredictionGrads>> {
    ctx.check(traj)?;
    Ok(grad_futures(traj, ctx, w.weights()[COLLISION], true))
}

/// Same as `grad_predictions`, but also differentiates logged futures.
pub fn grad_all_futures(traj: &Trajectory, ctx: &CostContext, w: &CostWeights) -> Result<Vec<PredictionGrads>> {
    ctx.check(traj)?;
    Ok(grad_futures(traj, ctx, w.weights()[COLLISION], false))
}

fn grad_futures(traj: &Trajectory, ctx: &CostContext, w1: f64, predicted_only: bool) -> Vec<PredictionGrads> {
    let sigma = ctx.params.sigma;
    let big_t = traj.horizon();
    ctx.agents
        .iter()
        .map(|a| {
            let mut g = PredictionGrads::zeros_like(a);
            if predicted_only && !a.predicted {
                return g;
            }
            for t in 1..=big_t {
                let p = traj.states[t].pos();
                let cp = collision_at(p, a, t - 1, sigma);
                let r1 = w1 * -cp.r / (2.0 * sigma * sigma);
                for (k, mode) in a.modes.iter().enumerate() {
                    let d = [p[0] - mode[t - 1][0], p[1] - mode[t - 1][1]];
                    let pi = a.probs[k];
                    g.means[k][t - 1][0] += r1 * (-2.0 * pi * d[0]);
                    g.means[k][t - 1][1] += r1 * (-2.0 * pi * d[1]);
                    g.probs[k] += r1 * (d[0] * d[0] + d[1] * d[1]);
                }
            }
            g
        })
        .collect()
}

/// Contraction of a trajectory-space direction `d_tau` (one 6-vector per
/// stage) with the mixed derivatives of the stage gradients. Returns
/// `sum_t d_tau_t . d(grad_t)/dw_i` for each term and the same contraction
/// differentiated with respect to every predicted agent's outputs.
pub fn contract_mixed(
    traj: &Trajectory,
    ctx: &CostContext,
    w: &CostWeights,
    slices: &[TermSlices],
    d_tau: &[Vec6],
) -> ([f64; NUM_TERMS], Vec<PredictionGrads>) {
    let mut dw = [0.0; NUM_TERMS];
    for (sl, d) in slices.iter().zip(d_tau) {
        for i in 0..NUM_TERMS {
            dw[i] += sl.grad[i].dot(d);
        }
    }
    let sigma = ctx.params.sigma;
    let s2 = sigma * sigma;
    let w1 = w.weights()[COLLISION];
    let big_t = traj.horizon();
    let preds = ctx
        .agents
        .iter()
        .map(|a| {
            let mut g = PredictionGrads::zeros_like(a);
            if !a.predicted {
                return g;
            }
            for t in 1..=big_t {
                let p = traj.states[t].pos();
                let dp = [d_tau[t][0], d_tau[t][1]];
                let cp = collision_at(p, a, t - 1, sigma);
                let r1 = -cp.r / (2.0 * s2);
                let r2 = cp.r / (4.0 * s2 * s2);
                let dg = dp[0] * cp.g[0] + dp[1] * cp.g[1];
                for (k, mode) in a.modes.iter().enumerate() {
                    let d = [p[0] - mode[t - 1][0], p[1] - mode[t - 1][1]];
                    let pi = a.probs[k];
                    // D = w1 * r'(z) * (dp . G)
                    for c in 0..2 {
                        g.means[k][t - 1][c] += w1 * (r2 * (-2.0 * pi * d[c]) * dg + r1 * (-2.0 * pi * dp[c]));
                    }
                    let dd = dp[0] * d[0] + dp[1] * d[1];
                    g.probs[k] += w1 * (r2 * (d[0] * d[0] + d[1] * d[1]) * dg + r1 * 2.0 * dd);
                }
            }
            g
        })
        .collect();
    (dw, preds)
}

/// Stage-wise gradient of the weighted cost as a flat list of 6-vectors.
pub fn stage_gradients(traj: &Trajectory, ctx: &CostContext, w: &CostWeights) -> Result<Vec<Vec6>> {
    Ok(quadratize(traj, ctx, w)?.into_iter().map(|q| q.grad).collect())
}
