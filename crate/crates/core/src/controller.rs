//! Box-constrained iLQR and its implicit-differentiation backward pass.
//!
//! The solver is generic over [`ControlProblem`]; [`DrivingProblem`] plugs in
//! the unicycle dynamics and the five-term cost. Box constraints are handled
//! in the backward Riccati sweep by clamping the feedforward term and zeroing
//! the feedback rows of clamped dimensions; the forward pass clamps controls
//! exactly.
//!
//! The backward pass differentiates the KKT conditions of the last LQR
//! approximation: it solves one more LQR with the training-loss gradient as
//! the linear cost term and the clamped dimensions frozen, then contracts the
//! resulting trajectory-space direction with the mixed derivatives of the
//! stage-cost gradients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::{self, CostContext, CostWeights, PredictionGrads, Vec6, NUM_TERMS};
use crate::dynamics::{self, wrap_angle, Control, ControlLimits, State, Trajectory};
use crate::error::{Error, Result};

/// A finite-horizon optimal control problem for the generic solver.
pub trait ControlProblem {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `(A, B)` Jacobians of `step`.
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
    /// Total cost; `xs` has one more entry than `us`.
    fn cost(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64;
    /// Per-stage `(hessian, gradient)` over `x_t ++ u_t`, for stages `0..=T`.
    fn quadratize(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Vec<(DMatrix<f64>, DVector<f64>)>;
    fn state_diff(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        a - b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlqrSettings {
    pub max_iters: usize,
    /// Threshold on the stacked 2-norm of the control-sequence change.
    pub conv_threshold: f64,
    pub line_search_max_tries: usize,
    /// Divisor applied to the step scale after a rejected try.
    pub line_search_shrink: f64,
}

impl Default for IlqrSettings {
    fn default() -> Self {
        IlqrSettings { max_iters: 5, conv_threshold: 0.05, line_search_max_tries: 5, line_search_shrink: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn unbounded(nu: usize) -> Self {
        Bounds { lower: DVector::from_element(nu, f64::NEG_INFINITY), upper: DVector::from_element(nu, f64::INFINITY) }
    }

    fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.lower[i], self.upper[i]))
    }
}

impl From<&ControlLimits> for Bounds {
    fn from(l: &ControlLimits) -> Self {
        Bounds { lower: DVector::from_row_slice(&l.lower_array()), upper: DVector::from_row_slice(&l.upper_array()) }
    }
}

/// Local LQR model of the problem around a trajectory.
#[derive(Debug, Clone)]
pub struct LqrModel {
    pub quads: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub lins: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Gains of one Riccati sweep.
#[derive(Debug, Clone)]
pub struct Gains {
    pub k: Vec<DVector<f64>>,
    pub feedback: Vec<DMatrix<f64>>,
    /// Per step, per control dimension: clamped to the box.
    pub active: Vec<Vec<bool>>,
}

enum BoxMode<'a> {
    /// Clamp the feedforward term into `[lo_t, hi_t]`.
    Clamp { lo: &'a [DVector<f64>], hi: &'a [DVector<f64>] },
    /// Hold the flagged dimensions at zero.
    Frozen(&'a [Vec<bool>]),
}

fn solve_spd(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.solve(rhs))
}

fn riccati(model: &LqrModel, nx: usize, nu: usize, mode: BoxMode) -> Option<Gains> {
    let big_t = model.lins.len();
    let (hess_t, grad_t) = &model.quads[big_t];
    let mut vxx = hess_t.view((0, 0), (nx, nx)).into_owned();
    let mut vx = grad_t.rows(0, nx).into_owned();
    let mut ks = vec![DVector::zeros(nu); big_t];
    let mut kks = vec![DMatrix::zeros(nu, nx); big_t];
    let mut active = vec![vec![false; nu]; big_t];
    for t in (0..big_t).rev() {
        let (a, b) = &model.lins[t];
        let (h, g) = &model.quads[t];
        let lxx = h.view((0, 0), (nx, nx));
        let luu = h.view((nx, nx), (nu, nu));
        let lux = h.view((nx, 0), (nu, nx));
        let qx = g.rows(0, nx) + a.transpose() * &vx;
        let qu = g.rows(nx, nu) + b.transpose() * &vx;
        let vxx_a = &vxx * a;
        let qxx = lxx + a.transpose() * &vxx_a;
        let quu = luu + b.transpose() * &vxx * b;
        let qux = lux + b.transpose() * &vxx_a;

        let mut clamped = vec![false; nu];
        let mut kc = DVector::zeros(nu);
        if let BoxMode::Frozen(mask) = &mode {
            clamped.copy_from_slice(&mask[t]);
        }
        let mut k;
        let mut kk;
        // grow the clamped set until the free dimensions are feasible
        loop {
            let free: Vec<usize> = (0..nu).filter(|&i| !clamped[i]).collect();
            k = kc.clone();
            kk = DMatrix::zeros(nu, nx);
            if !free.is_empty() {
                let nf = free.len();
                let quu_ff = DMatrix::from_fn(nf, nf, |i, j| quu[(free[i], free[j])]);
                let mut rhs = DMatrix::zeros(nf, 1 + nx);
                for (i, &fi) in free.iter().enumerate() {
                    let mut r = qu[fi];
                    for c in 0..nu {
                        if clamped[c] {
                            r += quu[(fi, c)] * kc[c];
                        }
                    }
                    rhs[(i, 0)] = r;
                    for j in 0..nx {
                        rhs[(i, 1 + j)] = qux[(fi, j)];
                    }
                }
                let sol = solve_spd(&quu_ff, &rhs)?;
                for (i, &fi) in free.iter().enumerate() {
                    k[fi] = -sol[(i, 0)];
                    for j in 0..nx {
                        kk[(fi, j)] = -sol[(i, 1 + j)];
                    }
                }
            }
            let BoxMode::Clamp { lo, hi } = &mode else { break };
            let mut grew = false;
            for i in 0..nu {
                if clamped[i] {
                    continue;
                }
                if k[i] < lo[t][i] {
                    clamped[i] = true;
                    kc[i] = lo[t][i];
                    grew = true;
                } else if k[i] > hi[t][i] {
                    clamped[i] = true;
                    kc[i] = hi[t][i];
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }

        let kt_quu = kk.transpose() * &quu;
        vx = &qx + &kt_quu * &k + kk.transpose() * &qu + qux.transpose() * &k;
        let new_vxx = &qxx + &kt_quu * &kk + kk.transpose() * &qux + qux.transpose() * &kk;
        vxx = (&new_vxx + new_vxx.transpose()) * 0.5;
        ks[t] = k;
        kks[t] = kk;
        active[t] = clamped;
    }
    Some(Gains { k: ks, feedback: kks, active })
}

/// Applies the gains to the linear model from `dx_0 = 0`.
fn linear_rollout(model: &LqrModel, gains: &Gains, nx: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let big_t = model.lins.len();
    let mut dxs = vec![DVector::zeros(nx)];
    let mut dus = Vec::with_capacity(big_t);
    for t in 0..big_t {
        let du = &gains.k[t] + &gains.feedback[t] * &dxs[t];
        let (a, b) = &model.lins[t];
        dxs.push(a * &dxs[t] + b * &du);
        dus.push(du);
    }
    (dxs, dus)
}

fn stacked_norm(v: &[DVector<f64>]) -> f64 {
    v.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt()
}

fn build_model<P: ControlProblem>(p: &P, xs: &[DVector<f64>], us: &[DVector<f64>]) -> LqrModel {
    let lins = (0..us.len()).map(|t| p.linearize(&xs[t], &us[t])).collect();
    LqrModel { quads: p.quadratize(xs, us), lins }
}

fn box_offsets(bounds: &Bounds, us: &[DVector<f64>]) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    (us.iter().map(|u| &bounds.lower - u).collect(), us.iter().map(|u| &bounds.upper - u).collect())
}

/// Result of the generic solver.
#[derive(Debug, Clone)]
pub struct GenericSolution {
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// Cost of the initialization followed by the cost after each iteration.
    pub cost_trace: Vec<f64>,
    /// LQR model around the returned trajectory.
    pub model: LqrModel,
    pub active_set: Vec<Vec<bool>>,
    /// Active set differs from the one of the previous iterate.
    pub active_set_changed: bool,
    /// The Riccati sweep failed (non positive-definite control Hessian).
    pub failed: bool,
}

/// Runs iLQR from `(xs, us)`. Line search starts at scale one and divides by
/// `line_search_shrink` after each rejected try; only non-increasing costs
/// are accepted. Converges when the accepted control change, or the full step
/// proposed at the new iterate, has stacked norm below the threshold.
pub fn solve_generic<P: ControlProblem>(
    p: &P,
    xs: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    bounds: &Bounds,
    settings: &IlqrSettings,
) -> GenericSolution {
    let nx = p.state_dim();
    let nu = p.control_dim();
    let mut xs = xs;
    let mut us = us;
    let mut cost = p.cost(&xs, &us);
    let mut cost_trace = vec![cost];
    let mut model = build_model(p, &xs, &us);
    let (lo, hi) = box_offsets(bounds, &us);
    let mut gains = riccati(&model, nx, nu, BoxMode::Clamp { lo: &lo, hi: &hi });
    let mut prev_active = gains.as_ref().map(|g| g.active.clone());
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=settings.max_iters {
        iterations = it;
        let Some(g) = gains.as_ref() else { break };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..settings.line_search_max_tries {
            let mut nxs = Vec::with_capacity(xs.len());
            let mut nus = Vec::with_capacity(us.len());
            nxs.push(xs[0].clone());
            for t in 0..us.len() {
                let dx = p.state_diff(&nxs[t], &xs[t]);
                let u = bounds.clamp(&(&us[t] + &g.k[t] * scale + &g.feedback[t] * dx));
                nxs.push(p.step(&nxs[t], &u));
                nus.push(u);
            }
            let c = p.cost(&nxs, &nus);
            if c <= cost {
                accepted = Some((nxs, nus, c));
                break;
            }
            scale /= settings.line_search_shrink;
        }
        let Some((nxs, nus, c)) = accepted else {
            // no decrease: the iterate stands and the change is zero
            cost_trace.push(cost);
            converged = true;
            break;
        };
        let change = stacked_norm(&nus.iter().zip(&us).map(|(a, b)| a - b).collect::<Vec<_>>());
        xs = nxs;
        us = nus;
        cost = c;
        cost_trace.push(cost);
        if change > 0.0 {
            model = build_model(p, &xs, &us);
            let (lo, hi) = box_offsets(bounds, &us);
            prev_active = gains.map(|g| g.active);
            gains = riccati(&model, nx, nu, BoxMode::Clamp { lo: &lo, hi: &hi });
        }
        if change < settings.conv_threshold {
            converged = true;
            break;
        }
        if let Some(g) = gains.as_ref() {
            let (_, dus) = linear_rollout(&model, g, nx);
            if stacked_norm(&dus) < settings.conv_threshold {
                converged = true;
                break;
            }
        }
    }
    let failed = gains.is_none();
    let active_set = gains.map(|g| g.active).unwrap_or_else(|| vec![vec![false; nu]; us.len()]);
    let active_set_changed = prev_active.map(|p| p != active_set).unwrap_or(true);
    GenericSolution {
        xs,
        us,
        converged: converged && !failed,
        iterations,
        cost_trace,
        model,
        active_set,
        active_set_changed,
        failed,
    }
}

/// Solves the LQR model with `linear` (one vector per stage over
/// `x_t ++ u_t`) as the linear cost term and the active set frozen at zero.
/// Returns the trajectory-space direction per stage.
pub fn adjoint_direction(model: &LqrModel, active: &[Vec<bool>], linear: &[DVector<f64>], nx: usize, nu: usize) -> Option<Vec<DVector<f64>>> {
    let adj = LqrModel {
        quads: model.quads.iter().zip(linear).map(|((h, _), g)| (h.clone(), g.clone())).collect(),
        lins: model.lins.clone(),
    };
    let gains = riccati(&adj, nx, nu, BoxMode::Frozen(active))?;
    let (dxs, dus) = linear_rollout(&adj, &gains, nx);
    let big_t = dus.len();
    Some(
        (0..=big_t)
            .map(|t| {
                let mut v = DVector::zeros(nx + nu);
                v.rows_mut(0, nx).copy_from(&dxs[t]);
                if t < big_t {
                    v.rows_mut(nx, nu).copy_from(&dus[t]);
                }
                v
            })
            .collect(),
    )
}

/// Full LQR step around `(xs, us)` with box clamping: the solution of the
/// local model, not rolled through the true dynamics.
pub fn lqr_step<P: ControlProblem>(p: &P, xs: &[DVector<f64>], us: &[DVector<f64>], bounds: &Bounds) -> Option<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let nx = p.state_dim();
    let model = build_model(p, xs, us);
    let (lo, hi) = box_offsets(bounds, us);
    let gains = riccati(&model, nx, p.control_dim(), BoxMode::Clamp { lo: &lo, hi: &hi })?;
    let (dxs, dus) = linear_rollout(&model, &gains, nx);
    Some((xs.iter().zip(&dxs).map(|(a, b)| a + b).collect(), us.iter().zip(&dus).map(|(a, b)| a + b).collect()))
}

// ---------------------------------------------------------------------------
// Driving specialization

pub fn state_vec(s: &State) -> DVector<f64> {
    DVector::from_row_slice(&s.to_array())
}

pub fn control_vec(u: &Control) -> DVector<f64> {
    DVector::from_row_slice(&u.to_array())
}

fn vec_state(v: &DVector<f64>) -> State {
    State { x: v[0], y: v[1], heading: v[2], v: v[3] }
}

fn vec_control(v: &DVector<f64>) -> Control {
    Control::new(v[0], v[1])
}

/// Unicycle dynamics with the five-term cost.
pub struct DrivingProblem<'a> {
    pub ctx: CostContext<'a>,
    pub weights: &'a CostWeights,
    pub dt: f64,
}

impl DrivingProblem<'_> {
    fn traj(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Trajectory {
        Trajectory { states: xs.iter().map(vec_state).collect(), controls: us.iter().map(vec_control).collect(), dt: self.dt }
    }
}

impl ControlProblem for DrivingProblem<'_> {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        state_vec(&dynamics::step_unchecked(&vec_state(x), &vec_control(u), self.dt))
    }

    fn linearize(&self, x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, b) = dynamics::jacobians_unchecked(&vec_state(x), self.dt);
        (DMatrix::from_iterator(4, 4, a.iter().cloned()), DMatrix::from_iterator(4, 2, b.iter().cloned()))
    }

    fn cost(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        cost::evaluate_unchecked(&self.traj(xs, us), &self.ctx, self.weights)
    }

    fn quadratize(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        let slices = cost::term_slices_unchecked(&self.traj(xs, us), &self.ctx);
        cost::combine_slices(&slices, self.weights, self.ctx.params.damping)
            .into_iter()
            .map(|q| (DMatrix::from_iterator(6, 6, q.hess.iter().cloned()), DVector::from_iterator(6, q.grad.iter().cloned())))
            .collect()
    }

    fn state_diff(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut d = a - b;
        d[2] = wrap_angle(d[2]);
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct IlqrConfig {
    pub settings: IlqrSettings,
    pub limits: ControlLimits,
}

#[derive(Debug, Clone)]
pub struct IlqrSolution {
    pub trajectory: Trajectory,
    pub converged: bool,
    pub iterations: usize,
    pub cost_trace: Vec<f64>,
    pub model: LqrModel,
    pub active_set: Vec<Vec<bool>>,
    pub active_set_changed: bool,
}

impl IlqrSolution {
    pub fn any_active(&self) -> bool {
        self.active_set.iter().flatten().any(|&a| a)
    }

    /// Whether `backward` will produce gradients.
    pub fn differentiable(&self) -> bool {
        self.converged && !self.active_set_changed
    }
}

/// Optimizes `init` (dynamically consistent, within limits) under the cost.
pub fn solve(init: &Trajectory, ctx: &CostContext, w: &CostWeights, cfg: &IlqrConfig) -> Result<IlqrSolution> {
    if !init.is_dynamically_consistent() {
        return Err(Error::domain("controller initialization is not dynamically consistent"));
    }
    if !init.within_limits(&cfg.limits) {
        return Err(Error::domain("controller initialization violates control limits"));
    }
    cost::terms(init, ctx)?;
    let problem = DrivingProblem { ctx: *ctx, weights: w, dt: init.dt };
    let xs = init.states.iter().map(state_vec).collect();
    let us = init.controls.iter().map(control_vec).collect();
    let sol = solve_generic(&problem, xs, us, &Bounds::from(&cfg.limits), &cfg.settings);
    let trajectory = problem.traj(&sol.xs, &sol.us);
    Ok(IlqrSolution {
        trajectory,
        converged: sol.converged,
        iterations: sol.iterations,
        cost_trace: sol.cost_trace,
        model: sol.model,
        active_set: sol.active_set,
        active_set_changed: sol.active_set_changed,
    })
}

/// Gradients of a training loss with respect to the cost parameters and the
/// predicted agents' outputs, obtained through the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGrads {
    pub dw: [f64; NUM_TERMS],
    pub dpsi: [f64; NUM_TERMS],
    pub dalpha: f64,
    /// One entry per agent of the cost context; zero for logged agents.
    pub predictions: Vec<PredictionGrads>,
    /// Unconverged or non-differentiable solve; all gradients are zero.
    pub skipped: bool,
}

impl ControllerGrads {
    fn zeros(ctx: &CostContext, skipped: bool) -> Self {
        ControllerGrads {
            dw: [0.0; NUM_TERMS],
            dpsi: [0.0; NUM_TERMS],
            dalpha: 0.0,
            predictions: ctx.agents.iter().map(PredictionGrads::zeros_like).collect(),
            skipped,
        }
    }
}

/// Backpropagates `dl_dtau` (per stage, gradient over `x_t ++ u_t`) through
/// the solve. Unconverged solves and solves whose active set changed on the
/// last iteration return zeros with `skipped` set.
pub fn backward(sol: &IlqrSolution, ctx: &CostContext, w: &CostWeights, dl_dtau: &[Vec6]) -> Result<ControllerGrads> {
    let big_t = sol.trajectory.horizon();
    if dl_dtau.len() != big_t + 1 {
        return Err(Error::Shape(format!("expected {} stage gradients, got {}", big_t + 1, dl_dtau.len())));
    }
    if !sol.differentiable() {
        return Ok(ControllerGrads::zeros(ctx, true));
    }
    let linear: Vec<DVector<f64>> = dl_dtau.iter().map(|v| DVector::from_iterator(6, v.iter().cloned())).collect();
    let Some(dir) = adjoint_direction(&sol.model, &sol.active_set, &linear, 4, 2) else {
        return Ok(ControllerGrads::zeros(ctx, true));
    };
    let d_tau: Vec<Vec6> = dir.iter().map(|v| Vec6::from_iterator(v.iter().cloned())).collect();
    let slices = cost::term_slices(&sol.trajectory, ctx)?;
    let (dw, predictions) = cost::contract_mixed(&sol.trajectory, ctx, w, &slices, &d_tau);
    let (dpsi, dalpha) = w.chain(&dw);
    Ok(ControllerGrads { dw, dpsi, dalpha, predictions, skipped: false })
}

/// The solution of the last LQR approximation around `expansion` under the
/// given cost. Its derivative in the cost parameters is what `backward`
/// computes, so finite differences of this map verify the backward pass.
pub fn final_lqr_map(expansion: &Trajectory, ctx: &CostContext, w: &CostWeights, limits: &ControlLimits) -> Option<Vec<Vec6>> {
    let problem = DrivingProblem { ctx: *ctx, weights: w, dt: expansion.dt };
    let xs: Vec<DVector<f64>> = expansion.states.iter().map(state_vec).collect();
    let us: Vec<DVector<f64>> = expansion.controls.iter().map(control_vec).collect();
    let (nxs, nus) = lqr_step(&problem, &xs, &us, &Bounds::from(limits))?;
    Some(
        (0..nxs.len())
            .map(|t| {
                let mut v = Vec6::zeros();
                for i in 0..4 {
                    v[i] = nxs[t][i];
                }
                if t < nus.len() {
                    v[4] = nus[t][0];
                    v[5] = nus[t][1];
                }
                v
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::AgentFuture;
    use crate::diffcheck::{central_difference, relative_error};
    use crate::dynamics::rollout;
    use crate::lanegeo::Lane;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Linear dynamics with a quadratic cost: x' = A x + B u,
    /// cost = sum_t 0.5 [x;u]^T H_t [x;u] + g_t^T [x;u].
    pub(crate) struct LinearQuadratic {
        pub a: DMatrix<f64>,
        pub b: DMatrix<f64>,
        pub h: Vec<DMatrix<f64>>,
        pub g: Vec<DVector<f64>>,
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
            let nx = self.state_dim();
            let nu = self.control_dim();
            (0..xs.len())
                .map(|t| {
                    let mut z = DVector::zeros(nx + nu);
                    z.rows_mut(0, nx).copy_from(&xs[t]);
                    if t < us.len() {
                        z.rows_mut(nx, nu).copy_from(&us[t]);
                    }
                    0.5 * (z.transpose() * &self.h[t] * &z)[0] + self.g[t].dot(&z)
                })
                .sum()
        }
        fn quadratize(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Vec<(DMatrix<f64>, DVector<f64>)> {
            let nx = self.state_dim();
            let nu = self.control_dim();
            (0..xs.len())
                .map(|t| {
                    let mut z = DVector::zeros(nx + nu);
                    z.rows_mut(0, nx).copy_from(&xs[t]);
                    if t < us.len() {
                        z.rows_mut(nx, nu).copy_from(&us[t]);
                    }
                    (self.h[t].clone(), &self.h[t] * z + &self.g[t])
                })
                .collect()
        }
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng, floor: f64) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(n, n) * floor
    }

    fn random_lq(rng: &mut ChaCha8Rng, t_len: usize) -> (LinearQuadratic, DVector<f64>) {
        let (nx, nu) = (4, 2);
        let a = DMatrix::identity(nx, nx) + DMatrix::from_fn(nx, nx, |_, _| rng.gen_range(-0.2..0.2));
        let b = DMatrix::from_fn(nx, nu, |_, _| rng.gen_range(-0.5..0.5));
        let mut h = Vec::new();
        let mut g = Vec::new();
        for t in 0..=t_len {
            let mut m = DMatrix::zeros(nx + nu, nx + nu);
            let q = random_spd(nx, rng, 0.1);
            m.view_mut((0, 0), (nx, nx)).copy_from(&q);
            if t < t_len {
                let r = random_spd(nu, rng, 0.5);
                m.view_mut((nx, nx), (nu, nu)).copy_from(&r);
            }
            h.push(m);
            let mut gv = DVector::from_fn(nx + nu, |_, _| rng.gen_range(-0.3..0.3));
            if t == t_len {
                gv.rows_mut(nx, nu).fill(0.0);
            }
            g.push(gv);
        }
        let x0 = DVector::from_fn(nx, |_, _| rng.gen_range(-1.0..1.0));
        (LinearQuadratic { a, b, h, g }, x0)
    }

    /// Direct solve of the stacked KKT system for the unconstrained LQ problem.
    fn kkt_solve(p: &LinearQuadratic, x0: &DVector<f64>, t_len: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let (nx, nu) = (p.state_dim(), p.control_dim());
        let nz = (t_len + 1) * nx + t_len * nu;
        let nc = (t_len + 1) * nx;
        let xi = |t: usize| t * nx;
        let ui = |t: usize| (t_len + 1) * nx + t * nu;
        let mut kkt = DMatrix::zeros(nz + nc, nz + nc);
        let mut rhs = DVector::zeros(nz + nc);
        for t in 0..=t_len {
            let h = &p.h[t];
            for i in 0..nx {
                for j in 0..nx {
                    kkt[(xi(t) + i, xi(t) + j)] += h[(i, j)];
                }
                rhs[xi(t) + i] = -p.g[t][i];
            }
            if t < t_len {
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
        // constraints: x_0 = x0; x_{t+1} - A x_t - B u_t = 0
        for t in 0..=t_len {
            let row = nz + t * nx;
            for i in 0..nx {
                kkt[(row + i, xi(t) + i)] = 1.0;
                kkt[(xi(t) + i, row + i)] = 1.0;
            }
            if t == 0 {
                for i in 0..nx {
                    rhs[row + i] = x0[i];
                }
            } else {
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
        }
        let z = kkt.lu().solve(&rhs).unwrap();
        let xs = (0..=t_len).map(|t| z.rows(xi(t), nx).into_owned()).collect();
        let us = (0..t_len).map(|t| z.rows(ui(t), nu).into_owned()).collect();
        (xs, us)
    }

    fn zero_init(p: &LinearQuadratic, x0: &DVector<f64>, t_len: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let us = vec![DVector::zeros(p.control_dim()); t_len];
        let mut xs = vec![x0.clone()];
        for t in 0..t_len {
            let next = p.step(&xs[t], &us[t]);
            xs.push(next);
        }
        (xs, us)
    }

    #[test]
    fn lq_converges_in_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (p, x0) = random_lq(&mut rng, 6);
            let (xs, us) = zero_init(&p, &x0, 6);
            let sol = solve_generic(&p, xs, us, &Bounds::unbounded(2), &IlqrSettings::default());
            let (ox, ou) = kkt_solve(&p, &x0, 6);
            assert!(sol.converged);
            assert_eq!(sol.iterations, 1);
            for (a, b) in sol.us.iter().zip(&ou) {
                assert!((a - b).norm() < 1e-8);
            }
            for (a, b) in sol.xs.iter().zip(&ox) {
                assert!((a - b).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn optimal_init_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (p, x0) = random_lq(&mut rng, 5);
        let (ox, ou) = kkt_solve(&p, &x0, 5);
        let sol = solve_generic(&p, ox.clone(), ou.clone(), &Bounds::unbounded(2), &IlqrSettings::default());
        assert!(sol.converged);
        assert_eq!(sol.iterations, 1);
        let change = stacked_norm(&sol.us.iter().zip(&ou).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(change < 1e-10);
    }

    /// Cost that the quadratic model always overestimates the benefit of: every
    /// step away from the start increases the true cost.
    struct Deceptive(LinearQuadratic);

    impl ControlProblem for Deceptive {
        fn state_dim(&self) -> usize {
            self.0.state_dim()
        }
        fn control_dim(&self) -> usize {
            self.0.control_dim()
        }
        fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            self.0.step(x, u)
        }
        fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
            self.0.linearize(x, u)
        }
        fn cost(&self, _xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
            us.iter().map(|u| u.norm_squared()).sum()
        }
        fn quadratize(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Vec<(DMatrix<f64>, DVector<f64>)> {
            self.0.quadratize(xs, us)
        }
    }

    #[test]
    fn failed_line_search_keeps_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (p, x0) = random_lq(&mut rng, 4);
        let (xs, us) = zero_init(&p, &x0, 4);
        let d = Deceptive(p);
        let sol = solve_generic(&d, xs.clone(), us.clone(), &Bounds::unbounded(2), &IlqrSettings::default());
        assert!(sol.converged);
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.us, us);
        assert_eq!(sol.xs, xs);
    }

    #[test]
    fn lq_backward_matches_fd_of_full_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let (p, x0) = random_lq(&mut rng, 5);
            let target: Vec<DVector<f64>> = (0..=5).map(|_| DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0))).collect();
            // L = sum_t target_t . z_t  (linear in the solution)
            let loss = |xs: &[DVector<f64>], us: &[DVector<f64>]| -> f64 {
                (0..=5)
                    .map(|t| {
                        let mut s = target[t].rows(0, 4).dot(&xs[t]);
                        if t < 5 {
                            s += target[t].rows(4, 2).dot(&us[t]);
                        }
                        s
                    })
                    .sum()
            };
            let (xs, us) = zero_init(&p, &x0, 5);
            let sol = solve_generic(&p, xs, us, &Bounds::unbounded(2), &IlqrSettings::default());
            let mut dl = target.clone();
            dl[5].rows_mut(4, 2).fill(0.0);
            let dir = adjoint_direction(&sol.model, &sol.active_set, &dl, 4, 2).unwrap();
            // dL/dg_t = dir_t for every stage's linear coefficient
            let coords: Vec<(usize, usize)> = (0..=5).flat_map(|t| (0..if t < 5 { 6 } else { 4 }).map(move |i| (t, i))).collect();
            let x_base: Vec<f64> = coords.iter().map(|&(t, i)| p.g[t][i]).collect();
            let f = |x: &[f64]| {
                let mut q = LinearQuadratic { a: p.a.clone(), b: p.b.clone(), h: p.h.clone(), g: p.g.clone() };
                for (k, &(t, i)) in coords.iter().enumerate() {
                    q.g[t][i] = x[k];
                }
                let (xs, us) = zero_init(&q, &x0, 5);
                let s = solve_generic(&q, xs, us, &Bounds::unbounded(2), &IlqrSettings::default());
                loss(&s.xs, &s.us)
            };
            let fd = central_difference(&f, &x_base, 1e-5);
            let an: Vec<f64> = coords.iter().map(|&(t, i)| dir[t][i]).collect();
            assert!(relative_error(&an, &fd) < 1e-4, "{}", relative_error(&an, &fd));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let lane = Lane::straight("l", [-20.0, 0.0], 0.0, 100.0, 1.0).unwrap();
        let init = rollout(&State::new(0.0, 0.5, 0.0, 5.0), &[Control::default(); 6], 0.5).unwrap();
        let modes = vec![(1..=6).map(|t| [init.states[t].x + 2.0, 1.5]).collect()];
        let agents = vec![AgentFuture::predicted(modes, vec![1.0])];
        let ctx = CostContext::new(&agents, State::new(16.0, 0.0, 0.0, 5.0), &lane);
        let w = CostWeights::hand_tuned();
        let sol = solve(&init, &ctx, &w, &IlqrConfig::default()).unwrap();
        assert!(sol.converged);
        let g = backward(&sol, &ctx, &w, &vec![Vec6::zeros(); 7]).unwrap();
        assert!(!g.skipped);
        assert_eq!(g.dw, [0.0; 5]);
        assert_eq!(g.predictions[0].norm(), 0.0);
        assert!(backward(&sol, &ctx, &w, &vec![Vec6::zeros(); 3]).is_err());
    }

    #[test]
    fn rejects_infeasible_init() {
        let lane = Lane::straight("l", [-20.0, 0.0], 0.0, 100.0, 1.0).unwrap();
        let init = rollout(&State::new(0.0, 0.0, 0.0, 5.0), &[Control::new(2.0, 0.0); 6], 0.5).unwrap();
        let ctx = CostContext::new(&[], *init.terminal(), &lane);
        assert!(solve(&init, &ctx, &CostWeights::hand_tuned(), &IlqrConfig::default()).is_err());
    }

    #[test]
    fn clamped_dimension_gets_no_gradient() {
        let lane = Lane::straight("l", [-20.0, 0.0], 0.0, 200.0, 1.0).unwrap();
        let init = rollout(&State::new(0.0, 0.0, 0.0, 5.0), &[Control::default(); 6], 0.5).unwrap();
        // goal far ahead pushes acceleration to its upper bound
        let ctx = CostContext::new(&[], State::new(80.0, 0.0, 0.0, 20.0), &lane);
        let w = CostWeights::hand_tuned();
        let cfg = IlqrConfig::default();
        let sol = solve(&init, &ctx, &w, &cfg).unwrap();
        assert!(sol.trajectory.within_limits(&cfg.limits));
        let clamped: Vec<usize> = (0..6).filter(|&t| sol.active_set[t][1]).collect();
        assert!(!clamped.is_empty());
        let dl: Vec<DVector<f64>> = (0..=6).map(|t| DVector::from_fn(6, |i, _| if t < 6 || i < 4 { 1.0 } else { 0.0 })).collect();
        let dir = adjoint_direction(&sol.model, &sol.active_set, &dl, 4, 2).unwrap();
        for t in clamped {
            assert_eq!(dir[t][5], 0.0);
        }
    }

    #[test]
    fn deterministic_and_monotone() {
        let lane = Lane::straight("l", [-20.0, 0.0], 0.0, 100.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..30 {
            let controls: Vec<Control> = (0..6).map(|_| Control::new(rng.gen_range(-0.3..0.3), rng.gen_range(-2.0..2.0))).collect();
            let init = rollout(&State::new(0.0, rng.gen_range(-1.0..1.0), 0.0, 6.0), &controls, 0.5).unwrap();
            let modes = vec![(1..=6).map(|t| [init.states[t].x + rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0)]).collect()];
            let agents = vec![AgentFuture::predicted(modes, vec![1.0])];
            let ctx = CostContext::new(&agents, State::new(18.0, 0.0, 0.0, 6.0), &lane);
            let w = CostWeights::hand_tuned();
            let a = solve(&init, &ctx, &w, &IlqrConfig::default()).unwrap();
            let b = solve(&init, &ctx, &w, &IlqrConfig::default()).unwrap();
            assert_eq!(a.trajectory, b.trajectory);
            assert!(a.cost_trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(a.trajectory.is_dynamically_consistent());
        }
    }
}
