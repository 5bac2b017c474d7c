//! Polyline lane centerlines and the geometric queries the planner and cost
//! need. No gradients flow through lane geometry.

use std::collections::HashSet;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, State};
use crate::error::{Error, Result};

/// Lanes within this distance of the goal are planning candidates.
pub const CANDIDATE_LANE_RADIUS: f64 = 4.5;
/// Lanes must point within this angle of the goal heading.
pub const CANDIDATE_LANE_MAX_HEADING_DIFF: f64 = FRAC_PI_2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanePoint {
    pub x: f64,
    pub y: f64,
    /// Heading of the outgoing segment (incoming for the last point).
    pub heading: f64,
    /// Cumulative arclength from the first point.
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLane", into = "RawLane")]
pub struct Lane {
    pub id: String,
    centerline: Vec<LanePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawLane {
    id: String,
    points: Vec<[f64; 2]>,
}

impl TryFrom<RawLane> for Lane {
    type Error = Error;
    fn try_from(raw: RawLane) -> Result<Self> {
        Lane::new(raw.id, &raw.points)
    }
}

impl From<Lane> for RawLane {
    fn from(lane: Lane) -> Self {
        RawLane { id: lane.id, points: lane.centerline.iter().map(|p| [p.x, p.y]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneProjection {
    pub closest_point: [f64; 2],
    /// Positive to the left of the lane direction.
    pub signed_lateral_offset: f64,
    pub lane_heading: f64,
    pub arclength: f64,
}

impl Lane {
    pub fn new(id: impl Into<String>, points: &[[f64; 2]]) -> Result<Self> {
        let id = id.into();
        if points.len() < 2 {
            return Err(Error::Schema(format!("lane {id}: needs at least 2 points")));
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Schema(format!("lane {id}: non-finite point")));
        }
        let mut centerline = Vec::with_capacity(points.len());
        let mut s = 0.0;
        for i in 0..points.len() {
            if i > 0 {
                let d = dist(points[i - 1], points[i]);
                if !(d > 0.0) {
                    return Err(Error::Schema(format!("lane {id}: repeated point at index {i}")));
                }
                s += d;
            }
            let (a, b) = if i + 1 < points.len() { (points[i], points[i + 1]) } else { (points[i - 1], points[i]) };
            let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
            centerline.push(LanePoint { x: points[i][0], y: points[i][1], heading, s });
        }
        Ok(Lane { id, centerline })
    }

    /// Straight lane from `start` along `heading` with points every `spacing` meters.
    pub fn straight(id: impl Into<String>, start: [f64; 2], heading: f64, length: f64, spacing: f64) -> Result<Self> {
        let n = (length / spacing).ceil().max(1.0) as usize;
        let step = length / n as f64;
        let (sin, cos) = heading.sin_cos();
        let pts: Vec<[f64; 2]> =
            (0..=n).map(|i| [start[0] + cos * step * i as f64, start[1] + sin * step * i as f64]).collect();
        Lane::new(id, &pts)
    }

    pub fn points(&self) -> &[LanePoint] {
        &self.centerline
    }

    pub fn length(&self) -> f64 {
        self.centerline.last().unwrap().s
    }

    /// Euclidean-nearest point on the polyline. Ties go to the earliest segment.
    pub fn project(&self, p: [f64; 2]) -> LaneProjection {
        let mut best_d2 = f64::INFINITY;
        let mut best = (0usize, 0.0f64);
        for i in 0..self.centerline.len() - 1 {
            let a = &self.centerline[i];
            let b = &self.centerline[i + 1];
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let t = (((p[0] - a.x) * dx + (p[1] - a.y) * dy) / len2).clamp(0.0, 1.0);
            let cx = a.x + t * dx;
            let cy = a.y + t * dy;
            let d2 = (p[0] - cx).powi(2) + (p[1] - cy).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = (i, t);
            }
        }
        let (i, t) = best;
        let a = &self.centerline[i];
        let b = &self.centerline[i + 1];
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let closest = [a.x + t * dx, a.y + t * dy];
        let cross = dx * (p[1] - closest[1]) - dy * (p[0] - closest[0]);
        let dist = best_d2.sqrt();
        LaneProjection {
            closest_point: closest,
            signed_lateral_offset: if cross < 0.0 { -dist } else { dist },
            lane_heading: a.heading,
            arclength: a.s + t * (b.s - a.s),
        }
    }

    /// Centerline point at `arclength` (clamped to the lane) shifted left by
    /// `lateral_offset`.
    pub fn point_at(&self, arclength: f64, lateral_offset: f64) -> ([f64; 2], f64) {
        let s = arclength.clamp(0.0, self.length());
        let pts = &self.centerline;
        let i = match pts.binary_search_by(|q| q.s.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(pts.len() - 2),
            Err(i) => i.saturating_sub(1).min(pts.len() - 2),
        };
        let a = &pts[i];
        let b = &pts[i + 1];
        let t = (s - a.s) / (b.s - a.s);
        let heading = a.heading;
        let (sin, cos) = heading.sin_cos();
        let x = a.x + t * (b.x - a.x) - sin * lateral_offset;
        let y = a.y + t * (b.y - a.y) + cos * lateral_offset;
        ([x, y], heading)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Lane>", into = "Vec<Lane>")]
pub struct LaneGraph {
    lanes: Vec<Lane>,
}

impl TryFrom<Vec<Lane>> for LaneGraph {
    type Error = Error;
    fn try_from(lanes: Vec<Lane>) -> Result<Self> {
        LaneGraph::new(lanes)
    }
}

impl From<LaneGraph> for Vec<Lane> {
    fn from(g: LaneGraph) -> Self {
        g.lanes
    }
}

impl LaneGraph {
    pub fn new(lanes: Vec<Lane>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &lanes {
            if !seen.insert(l.id.clone()) {
                return Err(Error::Schema(format!("duplicate lane id {}", l.id)));
            }
        }
        Ok(LaneGraph { lanes })
    }

    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    pub fn get(&self, id: &str) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }
}

/// Lanes close to and aligned with the goal.
pub fn candidate_lanes<'a>(graph: &'a LaneGraph, goal: &State) -> Vec<&'a Lane> {
    graph
        .lanes
        .iter()
        .filter(|lane| {
            let proj = lane.project(goal.pos());
            proj.signed_lateral_offset.abs() <= CANDIDATE_LANE_RADIUS
                && wrap_angle(proj.lane_heading - goal.heading).abs() < CANDIDATE_LANE_MAX_HEADING_DIFF
        })
        .collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
