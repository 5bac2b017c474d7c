//! Scenario data model, JSON Lines storage, synthetic generation and splits.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost::AgentFuture;
use crate::dynamics::{self, wrap_angle, Control, State, Trajectory};
use crate::error::{Error, Result};
use crate::lanegeo::{Lane, LaneGraph};
use crate::planner::PlannerConfig;
use crate::predictor::AgentHistory;
use crate::stack::{self, StackConfig};

pub const SCHEMA: &str = "drivestack.scenarios";
pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_DT: f64 = 0.5;
pub const PAST_SECONDS: f64 = 4.0;
pub const HORIZON_SECONDS: f64 = 3.0;
/// Closed-loop logs cover the simulation time plus one planning horizon.
pub const LONG_SECONDS: f64 = 13.0;

pub const LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    LaneFollow,
    LaneChange,
    Crossing,
    LeadBrake,
    CutIn,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::LaneFollow, Family::LaneChange, Family::Crossing, Family::LeadBrake, Family::CutIn];
    pub const INTERACTIVE: [Family; 3] = [Family::LeadBrake, Family::Crossing, Family::CutIn];

    pub fn name(&self) -> &'static str {
        match self {
            Family::LaneFollow => "lane_follow",
            Family::LaneChange => "lane_change",
            Family::Crossing => "crossing",
            Family::LeadBrake => "lead_brake",
            Family::CutIn => "cut_in",
        }
    }

    pub fn is_interactive(&self) -> bool {
        !matches!(self, Family::LaneFollow)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .iter()
            .find(|f| f.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown scenario family '{s}'")))
    }
}

/// Logged track of one agent. The future is `future_controls` rolled out from
/// the last past state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: String,
    #[serde(default)]
    pub past: Vec<State>,
    #[serde(default)]
    pub future: Vec<State>,
    #[serde(default)]
    pub future_controls: Vec<Control>,
}

impl AgentTrack {
    pub fn current(&self) -> &State {
        self.past.last().expect("validated track")
    }

    /// Future positions of steps `from+1 ..= from+len`.
    pub fn future_positions(&self, from: usize, len: usize) -> Vec<[f64; 2]> {
        self.future[from..from + len].iter().map(State::pos).collect()
    }

    /// Logged future over `len` steps from the current state.
    pub fn future_trajectory(&self, len: usize, dt: f64) -> Trajectory {
        let mut states = vec![*self.current()];
        states.extend_from_slice(&self.future[..len]);
        Trajectory { states, controls: self.future_controls[..len].to_vec(), dt }
    }

    /// State at log index `k`, where `k = past.len() - 1` is the current time.
    pub fn state_at(&self, k: usize) -> &State {
        if k < self.past.len() {
            &self.past[k]
        } else {
            &self.future[k - self.past.len()]
        }
    }

    pub fn log_len(&self) -> usize {
        self.past.len() + self.future.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub family: Family,
    pub dt: f64,
    /// Past steps; each past holds `past_steps + 1` states.
    pub past_steps: usize,
    /// Planning horizon in steps.
    pub horizon_steps: usize,
    pub agents: Vec<AgentTrack>,
    pub ego_id: String,
    pub predicted_agent_id: String,
    pub lane_graph: LaneGraph,
    pub goal: State,
}

impl Scenario {
    pub fn agent(&self, id: &str) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn ego(&self) -> &AgentTrack {
        self.agent(&self.ego_id).expect("validated scenario")
    }

    pub fn predicted(&self) -> &AgentTrack {
        self.agent(&self.predicted_agent_id).expect("validated scenario")
    }

    pub fn predicted_index(&self) -> usize {
        self.agents.iter().position(|a| a.id == self.predicted_agent_id).expect("validated scenario")
    }

    /// Agents other than ego and the predicted agent.
    pub fn others(&self) -> impl Iterator<Item = &AgentTrack> {
        self.agents.iter().filter(move |a| a.id != self.ego_id && a.id != self.predicted_agent_id)
    }

    pub fn future_steps(&self) -> usize {
        self.ego().future.len()
    }

    pub fn histories(&self) -> Vec<AgentHistory> {
        self.agents
            .iter()
            .map(|a| AgentHistory { id: a.id.clone(), states: a.past.clone(), is_ego: a.id == self.ego_id })
            .collect()
    }

    /// Logged ego trajectory over the planning horizon.
    pub fn gt_ego(&self) -> Trajectory {
        self.ego().future_trajectory(self.horizon_steps, self.dt)
    }

    /// Logged futures of the predicted agent and of the other agents over the
    /// planning horizon.
    pub fn gt_future(&self, id: &str) -> Option<AgentFuture> {
        self.agent(id).map(|a| AgentFuture::logged(a.future_positions(0, self.horizon_steps)))
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |m: String| Err(Error::Schema(format!("scenario {}: {m}", self.id)));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return schema(format!("dt must be positive, got {}", self.dt));
        }
        if self.horizon_steps == 0 {
            return schema("horizon_steps must be positive".into());
        }
        let mut ids = HashSet::new();
        for a in &self.agents {
            if !ids.insert(a.id.as_str()) {
                return schema(format!("duplicate agent id '{}'", a.id));
            }
            if a.past.len() != self.past_steps + 1 {
                return schema(format!("agent '{}': past has {} states, expected {}", a.id, a.past.len(), self.past_steps + 1));
            }
            if a.future.is_empty() {
                return schema(format!("agent '{}': missing future", a.id));
            }
            if a.future.len() < self.horizon_steps {
                return Err(Error::HorizonMismatch { expected: self.horizon_steps, got: a.future.len() });
            }
            if a.future_controls.len() != a.future.len() {
                return schema(format!("agent '{}': {} future controls for {} future states", a.id, a.future_controls.len(), a.future.len()));
            }
            if !a.past.iter().chain(&a.future).all(State::is_finite) || !a.future_controls.iter().all(Control::is_finite) {
                return schema(format!("agent '{}': non-finite values", a.id));
            }
        }
        if self.agent(&self.ego_id).is_none() {
            return schema(format!("ego '{}' not among agents", self.ego_id));
        }
        if self.agent(&self.predicted_agent_id).is_none() || self.predicted_agent_id == self.ego_id {
            return schema(format!("predicted agent '{}' missing or equal to ego", self.predicted_agent_id));
        }
        let n = self.ego().future.len();
        if self.agents.iter().any(|a| a.future.len() != n) {
            return schema("agents disagree on future length".into());
        }
        if self.goal != self.ego().future[self.horizon_steps - 1] {
            return schema("goal differs from the logged ego state at the horizon".into());
        }
        if self.lane_graph.is_empty() {
            return schema("empty lane graph".into());
        }
        Ok(())
    }

    /// Every logged future is the rollout of its controls.
    pub fn is_dynamically_consistent(&self) -> bool {
        self.agents.iter().all(|a| {
            let traj = Trajectory { states: std::iter::once(*a.current()).chain(a.future.iter().cloned()).collect(), controls: a.future_controls.clone(), dt: self.dt };
            traj.is_dynamically_consistent()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub schema: String,
    pub version: u32,
    pub dt: f64,
    pub past_steps: usize,
    pub horizon_steps: usize,
    pub count: usize,
}

pub fn save(path: &Path, scenarios: &[Scenario]) -> Result<()> {
    let first = scenarios.first().ok_or_else(|| Error::domain("no scenarios to save"))?;
    let header = FileHeader {
        schema: SCHEMA.into(),
        version: SCHEMA_VERSION,
        dt: first.dt,
        past_steps: first.past_steps,
        horizon_steps: first.horizon_steps,
        count: scenarios.len(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in scenarios {
        if s.dt != header.dt || s.past_steps != header.past_steps || s.horizon_steps != header.horizon_steps {
            return Err(Error::Schema(format!("scenario {} disagrees with the file header", s.id)));
        }
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Scenario>> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| Error::Schema("empty scenario file".into()))??;
    let header: FileHeader = serde_json::from_str(&first).map_err(|e| Error::Schema(format!("header: {e}")))?;
    if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
        return Err(Error::Schema(format!("unsupported schema {} v{}", header.schema, header.version)));
    }
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Scenario = serde_json::from_str(&line).map_err(|e| Error::Schema(format!("line {}: {e}", i + 2)))?;
        if s.dt != header.dt {
            return Err(Error::Schema(format!("scenario {}: dt {} differs from header dt {}", s.id, s.dt, header.dt)));
        }
        if s.past_steps != header.past_steps || s.horizon_steps != header.horizon_steps {
            return Err(Error::Schema(format!("scenario {}: horizons differ from the header", s.id)));
        }
        s.validate()?;
        out.push(s);
    }
    if out.len() != header.count {
        return Err(Error::Schema(format!("header announces {} scenarios, found {}", header.count, out.len())));
    }
    Ok(out)
}

/// Deterministic, disjoint split by id order after a seeded shuffle.
pub fn split(scenarios: &[Scenario], train_fraction: f64, seed: u64) -> (Vec<Scenario>, Vec<Scenario>) {
    let mut idx: Vec<usize> = (0..scenarios.len()).collect();
    idx.sort_by(|&a, &b| scenarios[a].id.cmp(&scenarios[b].id));
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction.clamp(0.0, 1.0) * scenarios.len() as f64).round() as usize;
    let (tr, va) = idx.split_at(n_train);
    (tr.iter().map(|&i| scenarios[i].clone()).collect(), va.iter().map(|&i| scenarios[i].clone()).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RejectReport {
    pub kept: usize,
    pub incomplete: usize,
    pub few_candidates: usize,
}

/// Drops scenarios with incomplete logs or fewer than two planner candidates.
pub fn reject_unsuitable(scenarios: Vec<Scenario>, cfg: &PlannerConfig) -> (Vec<Scenario>, RejectReport) {
    let mut report = RejectReport::default();
    let mut kept = Vec::new();
    for s in scenarios {
        if s.validate().is_err() {
            report.incomplete += 1;
            continue;
        }
        let pc = PlannerConfig { horizon: s.horizon_steps, dt: s.dt, ..cfg.clone() };
        let limits = dynamics::ControlLimits::default();
        match crate::planner::generate_candidates(s.ego().current(), &s.goal, &s.lane_graph, &pc, &limits) {
            Ok(_) => kept.push(s),
            Err(_) => report.few_candidates += 1,
        }
    }
    report.kept = kept.len();
    (kept, report)
}

// ---------------------------------------------------------------------------
// Synthetic generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub families: Vec<Family>,
    pub count: usize,
    pub seed: u64,
    pub dt: f64,
    /// Multiplier on all noise scales; zero gives noiseless logs.
    pub noise: f64,
    /// Emit 13 s logs for closed-loop simulation.
    pub long: bool,
    /// Probability of the threatening intent (brake, go, cut in, accelerate).
    pub intent_prob: f64,
    /// Probability that a threatening intent shows in the history.
    pub cue_prob: f64,
    /// Regenerate interactive scenarios whose logged future does not matter.
    pub certify: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            families: Family::INTERACTIVE.to_vec(),
            count: 100,
            seed: 0,
            dt: DEFAULT_DT,
            noise: 1.0,
            long: false,
            intent_prob: 0.5,
            cue_prob: 0.5,
            certify: true,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.count == 0 {
            return Err(Error::Config("generator needs at least one family and a positive count".into()));
        }
        if !(self.dt > 0.0) || !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.cue_prob) || !(0.0..=1.0).contains(&self.intent_prob) {
            return Err(Error::Config("generator needs dt > 0, noise >= 0 and probabilities in [0, 1]".into()));
        }
        let steps = |s: f64| (s / self.dt).round();
        if (steps(HORIZON_SECONDS) * self.dt - HORIZON_SECONDS).abs() > 1e-9 || (steps(PAST_SECONDS) * self.dt - PAST_SECONDS).abs() > 1e-9 {
            return Err(Error::Config(format!("dt {} does not divide the horizons", self.dt)));
        }
        Ok(())
    }
}

/// Straight reference line for the scripted drivers.
#[derive(Debug, Clone, Copy)]
struct Line {
    origin: [f64; 2],
    heading: f64,
}

impl Line {
    fn offsets(&self, s: &State) -> (f64, f64) {
        let (sin, cos) = self.heading.sin_cos();
        let dx = s.x - self.origin[0];
        let dy = s.y - self.origin[1];
        (-sin * dx + cos * dy, cos * dx + sin * dy)
    }

    fn at(&self, along: f64, lateral: f64) -> [f64; 2] {
        let (sin, cos) = self.heading.sin_cos();
        [self.origin[0] + cos * along - sin * lateral, self.origin[1] + sin * along + cos * lateral]
    }
}

/// Longitudinal behavior, piecewise in time (seconds relative to "now").
#[derive(Debug, Clone, Copy)]
enum Speed {
    /// Constant acceleration `a` from time `from` on, bounded to `[0, v_max]`.
    Accel { from: f64, a: f64, v_max: f64 },
    /// Brake to stop `at` meters along the current line, starting at `from`.
    StopAt { from: f64, at: f64 },
}

#[derive(Debug, Clone)]
struct Script {
    line: Line,
    /// Switch to another line at the given time.
    switch: Option<(f64, Line)>,
    speed: Vec<Speed>,
    /// Constant acceleration applied in the last second of the history.
    cue_accel: f64,
    /// Lateral target shift during the last second of the history.
    cue_shift: f64,
}

const K_HEADING: f64 = 1.2;
const K_LATERAL: f64 = 0.6;
const MAX_RATE: f64 = 0.8;

impl Script {
    fn follow(line: Line) -> Self {
        Script { line, switch: None, speed: Vec::new(), cue_accel: 0.0, cue_shift: 0.0 }
    }

    fn control(&self, s: &State, time: f64, dt: f64, noise: (f64, f64)) -> Control {
        let line = match self.switch {
            Some((t, l)) if time >= t - 1e-9 => l,
            _ => self.line,
        };
        let in_cue = time < 0.0 && time >= -1.0 - 1e-9;
        let (mut lat, along) = line.offsets(s);
        if in_cue {
            lat -= self.cue_shift;
        }
        let psi = wrap_angle(s.heading - line.heading);
        let rate = (-K_HEADING * psi - K_LATERAL * lat / s.v.max(1.0)).clamp(-MAX_RATE, MAX_RATE) + noise.0;
        let mut accel = if in_cue { self.cue_accel } else { 0.0 };
        if time >= 0.0 {
            for sp in &self.speed {
                match *sp {
                    Speed::Accel { from, a, v_max } if time >= from - 1e-9 => {
                        accel = if s.v + a * dt > v_max { (v_max - s.v).max(0.0) / dt } else { a };
                    }
                    Speed::StopAt { from, at } if time >= from - 1e-9 => {
                        let dist = at - along;
                        accel = if dist > 0.05 { -(s.v * s.v) / (2.0 * dist) } else { -s.v / dt };
                    }
                    _ => {}
                }
            }
        }
        accel += noise.1;
        // never reverse
        Control::new(rate, accel.max(-s.v / dt))
    }
}

struct Timing {
    dt: f64,
    past: usize,
    horizon: usize,
    future: usize,
}

impl Timing {
    fn time(&self, k: usize) -> f64 {
        (k as f64 - self.past as f64) * self.dt
    }
}

/// Rolls a script from `start` (state at `-past * dt`) through the whole log.
fn drive(script: &Script, start: State, tm: &Timing, rng: &mut ChaCha8Rng, noise: f64) -> AgentTrack {
    let n_rate = Normal::new(0.0, 0.02 * noise + f64::MIN_POSITIVE).unwrap();
    let n_acc = Normal::new(0.0, 0.15 * noise + f64::MIN_POSITIVE).unwrap();
    let mut states = vec![start];
    let mut controls = Vec::new();
    for k in 0..tm.past + tm.future {
        let nz = if noise > 0.0 { (n_rate.sample(rng), n_acc.sample(rng)) } else { (0.0, 0.0) };
        let u = script.control(&states[k], tm.time(k), tm.dt, nz);
        let next = dynamics::step_unchecked(&states[k], &u, tm.dt);
        states.push(next);
        controls.push(u);
    }
    AgentTrack {
        id: String::new(),
        past: states[..=tm.past].to_vec(),
        future: states[tm.past + 1..].to_vec(),
        future_controls: controls[tm.past..].to_vec(),
    }
}

/// Start state `past` seconds before "now" that reaches roughly `(along, lat)`
/// on `line` at speed `v` by driving straight.
fn back_start(line: &Line, along: f64, lat: f64, v: f64, tm: &Timing) -> State {
    let p = line.at(along - v * tm.past as f64 * tm.dt, lat);
    State::new(p[0], p[1], line.heading, v)
}

fn straight_lane(id: &str, line: &Line, from: f64, length: f64) -> Lane {
    Lane::straight(id, line.at(from, 0.0), line.heading, length, 5.0).expect("valid generated lane")
}

struct Draft {
    family: Family,
    ego: AgentTrack,
    target: AgentTrack,
    others: Vec<AgentTrack>,
    lanes: Vec<Lane>,
}

fn draft(family: Family, cfg: &ScenarioConfig, tm: &Timing, rng: &mut ChaCha8Rng) -> Draft {
    let noise = cfg.noise;
    let ego_line = Line { origin: [0.0, 0.0], heading: 0.0 };
    let left_line = Line { origin: [0.0, LANE_WIDTH], heading: 0.0 };
    let far = 200.0;
    let mut lanes = vec![straight_lane("ego", &ego_line, -far, 3.0 * far), straight_lane("left", &left_line, -far, 3.0 * far)];
    let horizon = if cfg.long { LONG_SECONDS - HORIZON_SECONDS } else { 1.0 };
    let v_e = rng.gen_range(6.0..10.0);
    let y0 = if noise > 0.0 { rng.gen_range(-0.3..0.3) * noise } else { 0.0 };
    let mut ego_script = Script::follow(ego_line);
    let intent = rng.gen_bool(cfg.intent_prob);
    let cue = intent && rng.gen_bool(cfg.cue_prob);
    let t_event = rng.gen_range(0.0..horizon);

    let (target_script, target_start) = match family {
        Family::LaneFollow => {
            let gap = rng.gen_range(70.0..100.0);
            let v = v_e + rng.gen_range(0.0..1.0);
            (Script::follow(ego_line), back_start(&ego_line, gap, 0.0, v, tm))
        }
        Family::LeadBrake => {
            let gap = rng.gen_range(8.0..16.0) + v_e * t_event * 0.5;
            let v = v_e + rng.gen_range(-1.0..1.0);
            let mut s = Script::follow(ego_line);
            if intent {
                s.speed.push(Speed::Accel { from: t_event, a: -rng.gen_range(2.0..3.5), v_max: f64::INFINITY });
            } else {
                s.speed.push(Speed::Accel { from: t_event, a: rng.gen_range(-0.3..0.3), v_max: v + 1.0 });
            }
            if cue {
                s.cue_accel = -0.8;
            }
            (s, back_start(&ego_line, gap, 0.0, v, tm))
        }
        Family::Crossing => {
            let t_arr = rng.gen_range(1.2..2.4) + if cfg.long { t_event } else { 0.0 };
            let x_c = v_e * t_arr;
            let cross = Line { origin: [x_c, 0.0], heading: std::f64::consts::FRAC_PI_2 };
            lanes.push(straight_lane("cross", &cross, -far, 2.0 * far));
            let v = rng.gen_range(5.0..8.0);
            let along = -v * t_arr + rng.gen_range(-1.5..1.5);
            let mut s = Script::follow(cross);
            let stop_line = -rng.gen_range(2.5..3.5);
            let brake_from = (t_arr - 1.5).max(0.0) * rng.gen_range(0.0..1.0);
            if !intent {
                s.speed.push(Speed::StopAt { from: brake_from, at: stop_line });
            }
            if cue {
                s.cue_accel = 0.8;
            }
            (s, back_start(&cross, along, 0.0, v, tm))
        }
        Family::CutIn => {
            let ahead = rng.gen_range(2.0..10.0) + if cfg.long { v_e * 0.1 * t_event } else { 0.0 };
            let v = v_e + rng.gen_range(-1.5..0.5);
            let mut s = Script::follow(left_line);
            if intent {
                s.switch = Some((t_event, ego_line));
            }
            if cue {
                s.cue_shift = -0.5;
            }
            (s, back_start(&left_line, ahead, 0.0, v, tm))
        }
        Family::LaneChange => {
            ego_script.switch = Some((rng.gen_range(0.0..0.5), left_line));
            let behind = rng.gen_range(4.0..12.0);
            let v = v_e + rng.gen_range(0.0..3.0);
            let mut s = Script::follow(left_line);
            if intent {
                s.speed.push(Speed::Accel { from: t_event, a: rng.gen_range(1.0..2.0), v_max: v + 4.0 });
            } else {
                s.speed.push(Speed::Accel { from: t_event, a: -rng.gen_range(1.5..2.5), v_max: v });
            }
            if cue {
                s.cue_accel = 0.8;
            }
            (s, back_start(&left_line, -behind, 0.0, v, tm))
        }
    };

    let ego = drive(&ego_script, back_start(&ego_line, 0.0, y0, v_e, tm), tm, rng, noise);
    let target = drive(&target_script, target_start, tm, rng, noise);
    let mut others = Vec::new();
    if rng.gen_bool(0.5) {
        // unrelated traffic well away from the ego
        let line = if rng.gen_bool(0.5) { left_line } else { ego_line };
        let along = if rng.gen_bool(0.5) { rng.gen_range(60.0..90.0) } else { -rng.gen_range(60.0..90.0) };
        let v = v_e + rng.gen_range(-0.5..0.5);
        others.push(drive(&Script::follow(line), back_start(&line, along, 0.0, v, tm), tm, rng, noise));
    }
    Draft { family, ego, target, others, lanes }
}

fn assemble(d: Draft, id: String, tm: &Timing) -> Result<Scenario> {
    let Draft { family, mut ego, mut target, mut others, lanes } = d;
    ego.id = "ego".into();
    target.id = "agent_0".into();
    for (i, o) in others.iter_mut().enumerate() {
        o.id = format!("agent_{}", i + 1);
    }
    let ego_now = *ego.current();
    let closest = std::iter::once(&target)
        .chain(&others)
        .min_by(|a, b| a.current().dist(&ego_now).partial_cmp(&b.current().dist(&ego_now)).unwrap())
        .unwrap()
        .id
        .clone();
    let goal = ego.future[tm.horizon - 1];
    let mut agents = vec![ego, target];
    agents.append(&mut others);
    let s = Scenario {
        id,
        family,
        dt: tm.dt,
        past_steps: tm.past,
        horizon_steps: tm.horizon,
        agents,
        ego_id: "ego".into(),
        predicted_agent_id: closest,
        lane_graph: LaneGraph::new(lanes)?,
        goal,
    };
    s.validate()?;
    Ok(s)
}

/// Maximum draws per scenario before giving up on certification.
const MAX_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenerationReport {
    pub generated: usize,
    pub attempts: usize,
    /// Interactive scenarios kept without passing certification.
    pub uncertified: usize,
}

pub fn generate(cfg: &ScenarioConfig) -> Result<(Vec<Scenario>, GenerationReport)> {
    cfg.validate()?;
    let steps = |s: f64| (s / cfg.dt).round() as usize;
    let tm = Timing {
        dt: cfg.dt,
        past: steps(PAST_SECONDS),
        horizon: steps(HORIZON_SECONDS),
        future: steps(if cfg.long { LONG_SECONDS } else { HORIZON_SECONDS }),
    };
    let stack_cfg = StackConfig::default();
    let mut out = Vec::with_capacity(cfg.count);
    let mut report = GenerationReport::default();
    for i in 0..cfg.count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let family = cfg.families[i % cfg.families.len()];
        let id = format!("{}-{:06}", family.name(), i);
        let mut chosen = None;
        for _ in 0..MAX_ATTEMPTS {
            report.attempts += 1;
            let s = assemble(draft(family, cfg, &tm, &mut rng), id.clone(), &tm)?;
            if crate::planner::generate_candidates(s.ego().current(), &s.goal, &s.lane_graph, &stack_cfg.planner_for(&s), &stack_cfg.ilqr.limits).is_err() {
                continue;
            }
            if !cfg.certify || !family.is_interactive() || stack::certify(&s, &stack_cfg, cfg.long)? {
                chosen = Some(s);
                break;
            }
            chosen.get_or_insert(s);
        }
        let s = chosen.ok_or_else(|| Error::Rejected(format!("could not generate a plannable {family} scenario")))?;
        if cfg.certify && family.is_interactive() && !stack::certify(&s, &stack_cfg, cfg.long)? {
            report.uncertified += 1;
        }
        out.push(s);
    }
    report.generated = out.len();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(family: Family, noise: f64, long: bool) -> Vec<Scenario> {
        let cfg = ScenarioConfig { families: vec![family], count: 6, seed: 5, noise, long, ..Default::default() };
        generate(&cfg).unwrap().0
    }

    #[test]
    fn generated_logs_are_consistent() {
        for f in Family::ALL {
            for s in small(f, 1.0, false) {
                s.validate().unwrap();
                assert!(s.is_dynamically_consistent(), "{}", s.id);
                assert_eq!(s.future_steps(), 6);
                assert_eq!(s.ego().past.len(), 9);
            }
        }
        for s in small(Family::LeadBrake, 1.0, true) {
            assert_eq!(s.future_steps(), 26);
            assert!(s.is_dynamically_consistent());
        }
    }

    #[test]
    fn noiseless_lane_follow_is_on_centerline() {
        for s in small(Family::LaneFollow, 0.0, false) {
            for st in s.ego().past.iter().chain(&s.ego().future) {
                assert_eq!(st.y, 0.0);
                assert_eq!(st.heading, 0.0);
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = ScenarioConfig { count: 6, seed: 9, ..Default::default() };
        assert_eq!(generate(&cfg).unwrap().0, generate(&cfg).unwrap().0);
        let other = ScenarioConfig { seed: 10, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn predicted_agent_is_closest() {
        for s in small(Family::CutIn, 1.0, false) {
            let ego = *s.ego().current();
            let d = s.predicted().current().dist(&ego);
            assert!(s.others().all(|a| a.current().dist(&ego) >= d));
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let scen = small(Family::Crossing, 1.0, false);
        save(&path, &scen).unwrap();
        assert_eq!(load(&path).unwrap(), scen);
    }

    #[test]
    fn schema_errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let scen = small(Family::LeadBrake, 1.0, false);
        save(&path, &scen).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();

        let mut v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        v["agents"][1].as_object_mut().unwrap().remove("future");
        let mut broken = lines.clone();
        broken[1] = v.to_string();
        std::fs::write(&path, broken.join("\n")).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("agent_0") && err.contains("missing future"), "{err}");

        let mut h: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
        h["dt"] = serde_json::json!(0.1);
        lines[0] = h.to_string();
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("dt"));

        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn split_properties() {
        let scen = small(Family::LaneFollow, 1.0, false);
        let (a, b) = split(&scen, 0.75, 3);
        assert_eq!(a.len() + b.len(), scen.len());
        assert_eq!(a.len(), 5);
        let ids: HashSet<&str> = a.iter().map(|s| s.id.as_str()).collect();
        assert!(b.iter().all(|s| !ids.contains(s.id.as_str())));
        assert_eq!(split(&scen, 0.75, 3), (a.clone(), b.clone()));
        let mut rev = scen.clone();
        rev.reverse();
        assert_eq!(split(&rev, 0.75, 3), (a, b));
    }

    #[test]
    fn reject_unsuitable_filters() {
        let (kept, rep) = reject_unsuitable(Vec::new(), &PlannerConfig::default());
        assert!(kept.is_empty() && rep.kept == 0);
        let scen = small(Family::LeadBrake, 1.0, false);
        let n = scen.len();
        let mut bad = scen[0].clone();
        // goal facing backwards leaves no candidate lane
        bad.goal.heading = std::f64::consts::PI;
        bad.id = "bad".into();
        let mut all = scen;
        all.push(bad);
        let (kept, rep) = reject_unsuitable(all, &PlannerConfig::default());
        assert_eq!(kept.len(), n);
        assert_eq!(rep.incomplete + rep.few_candidates, 1);
    }

    #[test]
    fn dt_ablation_scenarios() {
        let cfg = ScenarioConfig { families: vec![Family::LeadBrake], count: 2, dt: 0.1, ..Default::default() };
        let (s, _) = generate(&cfg).unwrap();
        assert_eq!(s[0].past_steps, 40);
        assert_eq!(s[0].horizon_steps, 30);
        assert!(s[0].is_dynamically_consistent());
        assert!(ScenarioConfig { dt: 0.7, ..cfg }.validate().is_err());
    }
}
