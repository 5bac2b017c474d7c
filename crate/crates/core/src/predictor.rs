//! Multimodal predictor: a two-layer tanh perceptron emitting `K` modes of
//! control sequences, integrated through the unicycle dynamics, plus mode
//! logits and per-step positional log-variances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, Control, State, Trajectory};
use crate::error::{Error, Result};

/// Distances and speeds enter the network divided by this.
const FEATURE_SCALE: f64 = 10.0;
/// Output-layer initialization scale; keeps the untrained model close to
/// constant velocity.
const HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub id: String,
    pub states: Vec<State>,
    pub is_ego: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorShape {
    pub modes: usize,
    pub hidden: usize,
    /// History length in states.
    pub history: usize,
    /// Prediction horizon in steps.
    pub horizon: usize,
}

impl PredictorShape {
    pub fn new(modes: usize, history: usize, horizon: usize) -> Self {
        PredictorShape { modes, hidden: 64, history, horizon }
    }

    fn inputs(&self) -> usize {
        8 * self.history + 1
    }

    fn outputs(&self) -> usize {
        self.modes * (1 + 3 * self.horizon)
    }

    pub fn num_params(&self) -> usize {
        let (i, h, o) = (self.inputs(), self.hidden, self.outputs());
        h * i + h + h * h + h + o * h + o
    }

    fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.hidden == 0 || self.history == 0 || self.horizon == 0 {
            return Err(Error::Config("predictor dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub shape: PredictorShape,
    pub theta: Vec<f64>,
}

/// Offsets of the weight blocks inside `theta`.
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

impl PredictorParams {
    /// All zeros: every mode is the constant-velocity rollout.
    pub fn zeros(shape: PredictorShape) -> Result<Self> {
        shape.validate()?;
        Ok(PredictorParams { shape, theta: vec![0.0; shape.num_params()] })
    }

    pub fn init(shape: PredictorShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PredictorParams::zeros(shape)?;
        let l = p.layout();
        let (i, h, o) = (shape.inputs(), shape.hidden, shape.outputs());
        let mut fill = |theta: &mut [f64], fan_in: usize, fan_out: usize, scale: f64| {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt() * scale;
            for x in theta.iter_mut() {
                *x = rng.gen_range(-lim..lim);
            }
        };
        fill(&mut p.theta[l.w1..l.b1], i, h, 1.0);
        fill(&mut p.theta[l.w2..l.b2], h, h, 1.0);
        fill(&mut p.theta[l.w3..l.b3], h, o, HEAD_INIT_SCALE);
        Ok(p)
    }

    fn layout(&self) -> Layout {
        let (i, h, o) = (self.shape.inputs(), self.shape.hidden, self.shape.outputs());
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        Layout { w1, b1, w2, b2, w3, b3 }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }
}

/// Output index helpers within the final layer.
fn logit_idx(k: usize) -> usize {
    k
}

fn control_idx(shape: &PredictorShape, k: usize, t: usize, c: usize) -> usize {
    shape.modes + (k * shape.horizon + t) * 2 + c
}

fn logvar_idx(shape: &PredictorShape, k: usize, t: usize) -> usize {
    shape.modes * (1 + 2 * shape.horizon) + k * shape.horizon + t
}

#[derive(Debug, Clone)]
struct Activations {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryPrediction {
    /// Rollouts from the target's current state; `T + 1` states each.
    pub modes: Vec<Trajectory>,
    pub probs: Vec<f64>,
    /// Positional variance per mode and step (m^2).
    pub pos_var: Vec<Vec<f64>>,
    pub logvar: Vec<Vec<f64>>,
    acts: Activations,
}

impl TrajectoryPrediction {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn horizon(&self) -> usize {
        self.modes[0].horizon()
    }

    /// Future positions (states `1..=T`) of each mode.
    pub fn mode_positions(&self) -> Vec<Vec<[f64; 2]>> {
        self.modes.iter().map(|m| m.states[1..].iter().map(|s| s.pos()).collect()).collect()
    }

    pub fn most_likely(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }
}

/// Gradient of a downstream loss with respect to the prediction outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionUpstream {
    /// `K x T` gradients on the future positions.
    pub positions: Vec<Vec<[f64; 2]>>,
    pub probs: Vec<f64>,
    /// Gradients directly on the mode logits, added after the softmax chain.
    pub logits: Vec<f64>,
    pub logvar: Vec<Vec<f64>>,
}

impl PredictionUpstream {
    pub fn zeros(k: usize, t: usize) -> Self {
        PredictionUpstream { positions: vec![vec![[0.0; 2]; t]; k], probs: vec![0.0; k], logits: vec![0.0; k], logvar: vec![vec![0.0; t]; k] }
    }

    pub fn add_scaled(&mut self, other: &PredictionUpstream, s: f64) {
        for (a, b) in self.positions.iter_mut().flatten().zip(other.positions.iter().flatten()) {
            a[0] += s * b[0];
            a[1] += s * b[1];
        }
        for (a, b) in self.probs.iter_mut().zip(&other.probs) {
            *a += s * b;
        }
        for (a, b) in self.logits.iter_mut().zip(&other.logits) {
            *a += s * b;
        }
        for (a, b) in self.logvar.iter_mut().flatten().zip(other.logvar.iter().flatten()) {
            *a += s * b;
        }
    }

    /// Adds cost-side gradients on mode positions and probabilities.
    pub fn add_cost_grads(&mut self, g: &crate::cost::PredictionGrads, s: f64) {
        for (a, b) in self.positions.iter_mut().flatten().zip(g.means.iter().flatten()) {
            a[0] += s * b[0];
            a[1] += s * b[1];
        }
        for (a, b) in self.probs.iter_mut().zip(&g.probs) {
            *a += s * b;
        }
    }
}

/// `(x, y, heading, v)` of `s` in the frame of `origin`, scaled.
fn relative_features(s: &State, origin: &State) -> [f64; 4] {
    let (sin, cos) = origin.heading.sin_cos();
    let dx = s.x - origin.x;
    let dy = s.y - origin.y;
    [
        (cos * dx + sin * dy) / FEATURE_SCALE,
        (-sin * dx + cos * dy) / FEATURE_SCALE,
        dynamics::wrap_angle(s.heading - origin.heading),
        s.v / FEATURE_SCALE,
    ]
}

fn features(target: &AgentHistory, ego: &AgentHistory) -> Vec<f64> {
    let origin = target.states.last().unwrap();
    let mut f = Vec::with_capacity(8 * target.states.len() + 1);
    for s in target.states.iter().chain(&ego.states) {
        f.extend_from_slice(&relative_features(s, origin));
    }
    f.push(if target.is_ego { 1.0 } else { 0.0 });
    f
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Predicts the future of `histories[target]`, conditioned on the ego history.
pub fn predict(histories: &[AgentHistory], target: usize, params: &PredictorParams, dt: f64) -> Result<TrajectoryPrediction> {
    let shape = &params.shape;
    let tgt = histories.get(target).ok_or_else(|| Error::domain(format!("target agent {target} not present")))?;
    let ego = histories.iter().find(|h| h.is_ego).ok_or_else(|| Error::domain("no ego history"))?;
    for h in [tgt, ego] {
        if h.states.len() != shape.history {
            return Err(Error::domain(format!("history of {} has {} states, expected {}", h.id, h.states.len(), shape.history)));
        }
        if !h.states.iter().all(State::is_finite) {
            return Err(Error::domain(format!("history of {} is not finite", h.id)));
        }
    }
    let l = params.layout();
    let (ni, nh, no) = (shape.inputs(), shape.hidden, shape.outputs());
    let th = &params.theta;
    let input = features(tgt, ego);
    let dense = |w: usize, b: usize, x: &[f64], rows: usize, cols: usize| -> Vec<f64> {
        (0..rows).map(|r| th[b + r] + (0..cols).map(|c| th[w + r * cols + c] * x[c]).sum::<f64>()).collect()
    };
    let h1: Vec<f64> = dense(l.w1, l.b1, &input, nh, ni).into_iter().map(f64::tanh).collect();
    let h2: Vec<f64> = dense(l.w2, l.b2, &h1, nh, nh).into_iter().map(f64::tanh).collect();
    let out = dense(l.w3, l.b3, &h2, no, nh);

    let k_modes = shape.modes;
    let big_t = shape.horizon;
    let probs = softmax(&(0..k_modes).map(|k| out[logit_idx(k)]).collect::<Vec<_>>());
    let start = *tgt.states.last().unwrap();
    let mut modes = Vec::with_capacity(k_modes);
    let mut logvar = Vec::with_capacity(k_modes);
    for k in 0..k_modes {
        let controls: Vec<Control> = (0..big_t)
            .map(|t| Control::new(out[control_idx(shape, k, t, 0)], out[control_idx(shape, k, t, 1)]))
            .collect();
        modes.push(dynamics::rollout(&start, &controls, dt)?);
        logvar.push((0..big_t).map(|t| out[logvar_idx(shape, k, t)]).collect::<Vec<_>>());
    }
    let pos_var = logvar.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
    Ok(TrajectoryPrediction { modes, probs, pos_var, logvar, acts: Activations { input, h1, h2 } })
}

/// Mean over steps of `-log sum_k pi_k N(gt_t; mu_kt, var_kt I)`.
pub fn nll(pred: &TrajectoryPrediction, gt: &[[f64; 2]]) -> Result<f64> {
    Ok(nll_with_grad(pred, gt)?.0)
}

pub fn nll_with_grad(pred: &TrajectoryPrediction, gt: &[[f64; 2]]) -> Result<(f64, PredictionUpstream)> {
    let big_t = pred.horizon();
    if gt.len() != big_t {
        return Err(Error::HorizonMismatch { expected: big_t, got: gt.len() });
    }
    let k_modes = pred.num_modes();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut up = PredictionUpstream::zeros(k_modes, big_t);
    let mut total = 0.0;
    let inv_t = 1.0 / big_t as f64;
    for t in 0..big_t {
        let mut lt = Vec::with_capacity(k_modes);
        let mut d2s = Vec::with_capacity(k_modes);
        for k in 0..k_modes {
            let mu = pred.modes[k].states[t + 1].pos();
            let d2 = (gt[t][0] - mu[0]).powi(2) + (gt[t][1] - mu[1]).powi(2);
            let lv = pred.logvar[k][t];
            lt.push(pred.probs[k].ln() - ln2pi - lv - 0.5 * d2 * (-lv).exp());
            d2s.push(d2);
        }
        let m = lt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lt.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total -= lse;
        for k in 0..k_modes {
            let r = (lt[k] - lse).exp();
            let inv_var = (-pred.logvar[k][t]).exp();
            let mu = pred.modes[k].states[t + 1].pos();
            up.positions[k][t][0] -= inv_t * r * (gt[t][0] - mu[0]) * inv_var;
            up.positions[k][t][1] -= inv_t * r * (gt[t][1] - mu[1]) * inv_var;
            up.logvar[k][t] += inv_t * r * (1.0 - 0.5 * d2s[k] * inv_var);
            up.logits[k] += inv_t * (pred.probs[k] - r);
        }
    }
    Ok((total * inv_t, up))
}

/// Mean displacement of the most likely mode; ties go to the lowest index.
pub fn ade(pred: &TrajectoryPrediction, gt: &[[f64; 2]]) -> Result<f64> {
    let big_t = pred.horizon();
    if gt.len() != big_t {
        return Err(Error::HorizonMismatch { expected: big_t, got: gt.len() });
    }
    let m = &pred.modes[pred.most_likely()];
    Ok((0..big_t).map(|t| {
        let p = m.states[t + 1].pos();
        (p[0] - gt[t][0]).hypot(p[1] - gt[t][1])
    }).sum::<f64>() / big_t as f64)
}

/// Backpropagates `upstream` to the parameters, adding into `grad`.
pub fn accumulate_grads(pred: &TrajectoryPrediction, params: &PredictorParams, upstream: &PredictionUpstream, grad: &mut [f64]) -> Result<()> {
    let shape = &params.shape;
    let (k_modes, big_t) = (shape.modes, shape.horizon);
    let shapes_ok = grad.len() == params.theta.len()
        && upstream.positions.len() == k_modes
        && upstream.positions.iter().all(|m| m.len() == big_t)
        && upstream.probs.len() == k_modes
        && upstream.logits.len() == k_modes
        && upstream.logvar.len() == k_modes
        && upstream.logvar.iter().all(|m| m.len() == big_t);
    if !shapes_ok {
        return Err(Error::domain("predictor upstream gradient shape mismatch"));
    }
    let no = shape.outputs();
    let mut d_out = vec![0.0; no];
    let dot: f64 = pred.probs.iter().zip(&upstream.probs).map(|(p, g)| p * g).sum();
    for k in 0..k_modes {
        d_out[logit_idx(k)] = pred.probs[k] * (upstream.probs[k] - dot) + upstream.logits[k];
        for t in 0..big_t {
            d_out[logvar_idx(shape, k, t)] = upstream.logvar[k][t];
        }
        // reverse through the rollout; only positions carry upstream
        let traj = &pred.modes[k];
        let dt = traj.dt;
        let mut lam = [0.0; 4];
        for t in (0..big_t).rev() {
            let up = upstream.positions[k][t];
            lam[0] += up[0];
            lam[1] += up[1];
            d_out[control_idx(shape, k, t, 0)] = dt * lam[2];
            d_out[control_idx(shape, k, t, 1)] = dt * lam[3];
            let s = &traj.states[t];
            let (sin, cos) = s.heading.sin_cos();
            // lam_t = A_t^T lam_{t+1}
            lam[2] += lam[0] * (-s.v * sin * dt) + lam[1] * (s.v * cos * dt);
            lam[3] += lam[0] * (cos * dt) + lam[1] * (sin * dt);
        }
    }
    if d_out.iter().all(|&g| g == 0.0) {
        return Ok(());
    }
    let l = params.layout();
    let (ni, nh) = (shape.inputs(), shape.hidden);
    let th = &params.theta;
    let a = &pred.acts;
    let mut d_h2 = vec![0.0; nh];
    for (r, &g) in d_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad[l.b3 + r] += g;
        for c in 0..nh {
            grad[l.w3 + r * nh + c] += g * a.h2[c];
            d_h2[c] += g * th[l.w3 + r * nh + c];
        }
    }
    let d_z2: Vec<f64> = d_h2.iter().zip(&a.h2).map(|(g, h)| g * (1.0 - h * h)).collect();
    let mut d_h1 = vec![0.0; nh];
    for r in 0..nh {
        grad[l.b2 + r] += d_z2[r];
        for c in 0..nh {
            grad[l.w2 + r * nh + c] += d_z2[r] * a.h1[c];
            d_h1[c] += d_z2[r] * th[l.w2 + r * nh + c];
        }
    }
    for r in 0..nh {
        let dz = d_h1[r] * (1.0 - a.h1[r] * a.h1[r]);
        grad[l.b1 + r] += dz;
        for c in 0..ni {
            grad[l.w1 + r * ni + c] += dz * a.input[c];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcheck::{central_difference_at, relative_error, sample_coords};

    fn histories(rng: &mut ChaCha8Rng, n: usize) -> Vec<AgentHistory> {
        let mk = |rng: &mut ChaCha8Rng, id: &str, is_ego: bool| {
            let s0 = State::new(rng.gen_range(-10.0..10.0), rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0), rng.gen_range(2.0..10.0));
            let u: Vec<Control> = (0..n - 1).map(|_| Control::new(rng.gen_range(-0.2..0.2), rng.gen_range(-1.0..1.0))).collect();
            AgentHistory { id: id.into(), states: dynamics::rollout(&s0, &u, 0.5).unwrap().states, is_ego }
        };
        vec![mk(rng, "ego", true), mk(rng, "a", false)]
    }

    fn random_params(shape: PredictorShape, seed: u64, scale: f64) -> PredictorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PredictorParams::zeros(shape).unwrap();
        for x in p.theta.iter_mut() {
            *x = rng.gen_range(-scale..scale);
        }
        p
    }

    #[test]
    fn zero_params_give_constant_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let h = histories(&mut rng, 9);
        let p = PredictorParams::zeros(PredictorShape::new(3, 9, 6)).unwrap();
        let pred = predict(&h, 1, &p, 0.5).unwrap();
        let cv = dynamics::rollout(h[1].states.last().unwrap(), &[Control::default(); 6], 0.5).unwrap();
        for m in &pred.modes {
            assert_eq!(m, &cv);
        }
        assert!(pred.probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(pred.pos_var.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn single_mode_has_unit_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = histories(&mut rng, 9);
        let pred = predict(&h, 1, &random_params(PredictorShape::new(1, 9, 6), 1, 0.3), 0.5).unwrap();
        assert_eq!(pred.probs, vec![1.0]);
    }

    #[test]
    fn probabilities_normalized_and_modes_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for seed in 0..20 {
            let h = histories(&mut rng, 9);
            let pred = predict(&h, 1, &random_params(PredictorShape::new(4, 9, 6), seed, 0.5), 0.5).unwrap();
            assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(pred.modes.iter().all(|m| m.is_dynamically_consistent()));
            assert!(pred.pos_var.iter().flatten().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn missing_history_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut h = histories(&mut rng, 9);
        let p = PredictorParams::zeros(PredictorShape::new(2, 9, 6)).unwrap();
        assert!(predict(&h, 5, &p, 0.5).is_err());
        h[1].states.pop();
        assert!(predict(&h, 1, &p, 0.5).is_err());
    }

    #[test]
    fn nll_closed_form_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let h = histories(&mut rng, 9);
        let mut p = PredictorParams::zeros(PredictorShape::new(1, 9, 6)).unwrap();
        let pred = predict(&h, 1, &p, 0.5).unwrap();
        let gt: Vec<[f64; 2]> = pred.mode_positions()[0].clone();
        assert!((nll(&pred, &gt).unwrap() - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let l = p.layout();
        let mut last = nll(&pred, &gt).unwrap();
        for _ in 0..5 {
            for t in 0..6 {
                p.theta[l.b3 + logvar_idx(&p.shape, 0, t)] -= 0.3;
            }
            let v = nll(&predict(&h, 1, &p, 0.5).unwrap(), &gt).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(nll(&pred, &gt[..3]).is_err());
    }

    fn literal_nll(pred: &TrajectoryPrediction, gt: &[[f64; 2]]) -> f64 {
        let mut s = 0.0;
        for t in 0..gt.len() {
            let mut lik = 0.0;
            for k in 0..pred.num_modes() {
                let mu = pred.modes[k].states[t + 1].pos();
                let var = pred.pos_var[k][t];
                let d2 = (gt[t][0] - mu[0]).powi(2) + (gt[t][1] - mu[1]).powi(2);
                lik += pred.probs[k] * (-d2 / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var);
            }
            s -= lik.ln();
        }
        s / gt.len() as f64
    }

    #[test]
    fn nll_matches_literal_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for seed in 0..30 {
            let k = 1 + (seed as usize % 4);
            let t = 2 + (seed as usize % 5);
            let h = histories(&mut rng, 5);
            let pred = predict(&h, 1, &random_params(PredictorShape::new(k, 5, t), seed, 0.3), 0.5).unwrap();
            let gt: Vec<[f64; 2]> = pred.mode_positions()[0].iter().map(|p| [p[0] + rng.gen_range(-1.0..1.0), p[1] + rng.gen_range(-1.0..1.0)]).collect();
            assert!((nll(&pred, &gt).unwrap() - literal_nll(&pred, &gt)).abs() < 1e-10);
        }
    }

    #[test]
    fn ade_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let h = histories(&mut rng, 9);
        let pred = predict(&h, 1, &random_params(PredictorShape::new(3, 9, 6), 3, 0.3), 0.5).unwrap();
        let best = pred.mode_positions()[pred.most_likely()].clone();
        assert_eq!(ade(&pred, &best).unwrap(), 0.0);
        let shifted: Vec<[f64; 2]> = best.iter().map(|p| [p[0], p[1] + 1.0]).collect();
        assert!((ade(&pred, &shifted).unwrap() - 1.0).abs() < 1e-12);
        // enumeration oracle
        let k = (0..3).fold(0, |b, k| if pred.probs[k] > pred.probs[b] { k } else { b });
        let brute: f64 = (0..6).map(|t| {
            let p = pred.modes[k].states[t + 1].pos();
            ((p[0] - shifted[t][0]).powi(2) + (p[1] - shifted[t][1]).powi(2)).sqrt()
        }).sum::<f64>() / 6.0;
        assert_eq!(ade(&pred, &shifted).unwrap(), brute);
    }

    #[test]
    fn metrics_invariant_to_mode_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let h = histories(&mut rng, 9);
        let pred = predict(&h, 1, &random_params(PredictorShape::new(3, 9, 6), 4, 0.3), 0.5).unwrap();
        let gt: Vec<[f64; 2]> = pred.mode_positions()[1].clone();
        let mut perm = pred.clone();
        let order = [2, 0, 1];
        perm.modes = order.iter().map(|&k| pred.modes[k].clone()).collect();
        perm.probs = order.iter().map(|&k| pred.probs[k]).collect();
        perm.pos_var = order.iter().map(|&k| pred.pos_var[k].clone()).collect();
        perm.logvar = order.iter().map(|&k| pred.logvar[k].clone()).collect();
        assert!((nll(&pred, &gt).unwrap() - nll(&perm, &gt).unwrap()).abs() < 1e-12);
        assert_eq!(ade(&pred, &gt).unwrap(), ade(&perm, &gt).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let h = histories(&mut rng, 9);
        let p = random_params(PredictorShape::new(2, 9, 6), 5, 0.3);
        let pred = predict(&h, 1, &p, 0.5).unwrap();
        let mut g = vec![0.0; p.theta.len()];
        accumulate_grads(&pred, &p, &PredictionUpstream::zeros(2, 6), &mut g).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(accumulate_grads(&pred, &p, &PredictionUpstream::zeros(3, 6), &mut g).is_err());
    }

    #[test]
    fn one_mode_upstream_touches_only_its_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let h = histories(&mut rng, 9);
        let p = random_params(PredictorShape::new(3, 9, 6), 6, 0.3);
        let pred = predict(&h, 1, &p, 0.5).unwrap();
        let mut up = PredictionUpstream::zeros(3, 6);
        up.positions[1][4] = [0.7, -0.2];
        let mut g = vec![0.0; p.theta.len()];
        accumulate_grads(&pred, &p, &up, &mut g).unwrap();
        let l = p.layout();
        let nh = p.shape.hidden;
        for r in 0..p.shape.outputs() {
            let is_mode1_control = (0..6).any(|t| r == control_idx(&p.shape, 1, t, 0) || r == control_idx(&p.shape, 1, t, 1));
            if !is_mode1_control {
                assert_eq!(g[l.b3 + r], 0.0);
                assert!((0..nh).all(|c| g[l.w3 + r * nh + c] == 0.0));
            }
        }
        assert!(g[l.w1..l.b3].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for seed in 0..10 {
            let h = histories(&mut rng, 5);
            let shape = PredictorShape { modes: 3, hidden: 8, history: 5, horizon: 4 };
            let p = random_params(shape, seed, 0.4);
            let pred = predict(&h, 1, &p, 0.5).unwrap();
            let gt: Vec<[f64; 2]> = pred.mode_positions()[0].iter().map(|q| [q[0] + rng.gen_range(-2.0..2.0), q[1] + rng.gen_range(-2.0..2.0)]).collect();
            // NLL plus a linear functional of positions and probabilities
            let wpos: Vec<f64> = (0..3 * 4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wprob: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |theta: &[f64]| {
                let q = PredictorParams { shape, theta: theta.to_vec() };
                let pr = predict(&h, 1, &q, 0.5).unwrap();
                let mut l = nll(&pr, &gt).unwrap();
                for (i, p) in pr.mode_positions().iter().flatten().enumerate() {
                    l += wpos[2 * i] * p[0] + wpos[2 * i + 1] * p[1];
                }
                l + pr.probs.iter().zip(&wprob).map(|(a, b)| a * b).sum::<f64>()
            };
            let (_, mut up) = nll_with_grad(&pred, &gt).unwrap();
            for k in 0..3 {
                for t in 0..4 {
                    up.positions[k][t][0] += wpos[2 * (k * 4 + t)];
                    up.positions[k][t][1] += wpos[2 * (k * 4 + t) + 1];
                }
                up.probs[k] += wprob[k];
            }
            let mut g = vec![0.0; p.theta.len()];
            accumulate_grads(&pred, &p, &up, &mut g).unwrap();
            let coords = sample_coords(p.theta.len(), 64, seed);
            let fd = central_difference_at(&loss, &p.theta, 1e-5, &coords);
            let an: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
            assert!(relative_error(&an, &fd) < 1e-5, "{}", relative_error(&an, &fd));
        }
    }
}
