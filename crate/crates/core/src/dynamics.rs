//! Dynamically-extended unicycle with forward-Euler discretization.
//!
//! State is `(x, y, heading, v)`, control is `(heading_rate, accel)`. Position
//! advances with the pre-update heading and speed, so the Jacobians stay
//! closed-form.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Matrix4x2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 4;
pub const CONTROL_DIM: usize = 2;

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
}

impl State {
    pub fn new(x: f64, y: f64, heading: f64, v: f64) -> Self {
        State { x, y, heading: wrap_angle(heading), v }
    }

    pub fn pos(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite() && self.v.is_finite()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.heading, self.v]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        State::new(a[0], a[1], a[2], a[3])
    }

    /// 2D Euclidean distance between positions.
    pub fn dist(&self, other: &State) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub heading_rate: f64,
    pub accel: f64,
}

impl Control {
    pub fn new(heading_rate: f64, accel: f64) -> Self {
        Control { heading_rate, accel }
    }

    pub fn is_finite(&self) -> bool {
        self.heading_rate.is_finite() && self.accel.is_finite()
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.heading_rate, self.accel]
    }
}

/// Component-wise control bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlLimits {
    pub lower: Control,
    pub upper: Control,
}

impl Default for ControlLimits {
    fn default() -> Self {
        ControlLimits {
            lower: Control::new(-1.0, -4.0),
            upper: Control::new(1.0, 3.0),
        }
    }
}

impl ControlLimits {
    pub fn new(lower: Control, upper: Control) -> Result<Self> {
        if lower.heading_rate > upper.heading_rate || lower.accel > upper.accel {
            return Err(Error::domain("control limits: lower bound exceeds upper bound"));
        }
        Ok(ControlLimits { lower, upper })
    }

    pub fn contains(&self, u: &Control) -> bool {
        u.heading_rate >= self.lower.heading_rate
            && u.heading_rate <= self.upper.heading_rate
            && u.accel >= self.lower.accel
            && u.accel <= self.upper.accel
    }

    pub fn clamp(&self, u: &Control) -> Control {
        Control::new(
            u.heading_rate.clamp(self.lower.heading_rate, self.upper.heading_rate),
            u.accel.clamp(self.lower.accel, self.upper.accel),
        )
    }

    pub fn lower_array(&self) -> [f64; 2] {
        self.lower.to_array()
    }

    pub fn upper_array(&self) -> [f64; 2] {
        self.upper.to_array()
    }
}

/// States and controls with `states.len() == controls.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
    pub dt: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn initial(&self) -> &State {
        &self.states[0]
    }

    pub fn terminal(&self) -> &State {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Re-applies `step` and compares bit-exactly.
    pub fn is_dynamically_consistent(&self) -> bool {
        if self.states.len() != self.controls.len() + 1 {
            return false;
        }
        self.controls.iter().enumerate().all(|(t, u)| {
            step(&self.states[t], u, self.dt).map(|s| s == self.states[t + 1]).unwrap_or(false)
        })
    }

    pub fn within_limits(&self, limits: &ControlLimits) -> bool {
        self.controls.iter().all(|u| limits.contains(u))
    }
}

fn check_inputs(s: &State, u: &Control, dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::domain(format!("dt must be positive and finite, got {dt}")));
    }
    if !s.is_finite() || !u.is_finite() {
        return Err(Error::domain("non-finite state or control"));
    }
    Ok(())
}

/// One forward-Euler step.
pub fn step(s: &State, u: &Control, dt: f64) -> Result<State> {
    check_inputs(s, u, dt)?;
    Ok(step_unchecked(s, u, dt))
}

// Out of line so every caller rounds identically.
#[inline(never)]
pub(crate) fn step_unchecked(s: &State, u: &Control, dt: f64) -> State {
    let (sin, cos) = s.heading.sin_cos();
    State {
        x: s.x + s.v * cos * dt,
        y: s.y + s.v * sin * dt,
        heading: wrap_angle(s.heading + u.heading_rate * dt),
        v: s.v + u.accel * dt,
    }
}

/// Returns `(A, B)` with `A = d step / d state` and `B = d step / d control`.
pub fn jacobians(s: &State, u: &Control, dt: f64) -> Result<(Matrix4<f64>, Matrix4x2<f64>)> {
    check_inputs(s, u, dt)?;
    Ok(jacobians_unchecked(s, dt))
}

#[inline]
pub(crate) fn jacobians_unchecked(s: &State, dt: f64) -> (Matrix4<f64>, Matrix4x2<f64>) {
    let (sin, cos) = s.heading.sin_cos();
    let mut a = Matrix4::identity();
    a[(0, 2)] = -s.v * sin * dt;
    a[(0, 3)] = cos * dt;
    a[(1, 2)] = s.v * cos * dt;
    a[(1, 3)] = sin * dt;
    let mut b = Matrix4x2::zeros();
    b[(2, 0)] = dt;
    b[(3, 1)] = dt;
    (a, b)
}

/// Applies `step` repeatedly from `s0`.
pub fn rollout(s0: &State, controls: &[Control], dt: f64) -> Result<Trajectory> {
    if controls.is_empty() {
        return Err(Error::domain("rollout needs at least one control"));
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*s0);
    for u in controls {
        let next = step(states.last().unwrap(), u, dt)?;
        states.push(next);
    }
    Ok(Trajectory { states, controls: controls.to_vec(), dt })
}
