use serde::{Deserialize, Serialize};

use super::{NeuralError, Result};
use crate::geometry::{
    heading_vec, lerp_angle, normalize_angle, project_to_path, EgoState, Polyline, Trajectory, Vec2,
};

pub const HISTORY_FRAMES: usize = 10;
pub const HISTORY_CHANNELS: usize = 9;
pub const HISTORY_SPACING_S: f64 = 0.2;
pub const PATH_POINTS: usize = 40;
pub const PATH_SPACING_M: f64 = 1.0;
pub const HISTORY_DIM: usize = HISTORY_FRAMES * HISTORY_CHANNELS;
pub const PATH_DIM: usize = PATH_POINTS * 2;
pub const FEATURE_DIM: usize = HISTORY_DIM + PATH_DIM;

/// Ego-frame network input. `history` is frame-major, oldest frame first,
/// channels `x y heading vel_lon vel_lat vel_ang acc_lon acc_lat acc_ang`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub history: Vec<f64>,
    pub path: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.history.len() + self.path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.history.len() != HISTORY_DIM || self.path.len() != PATH_DIM {
            return Err(NeuralError::Shape(format!(
                "feature blocks {}+{}, expected {HISTORY_DIM}+{PATH_DIM}",
                self.history.len(),
                self.path.len()
            )));
        }
        if !self.history.iter().chain(&self.path).all(|v| v.is_finite()) {
            return Err(NeuralError::Shape("non-finite feature".into()));
        }
        Ok(())
    }
}

fn interpolate(history: &[EgoState], t: f64) -> EgoState {
    let j = history.partition_point(|s| s.timestamp <= t);
    if j == 0 {
        return history[0];
    }
    if j == history.len() {
        return history[j - 1];
    }
    let (a, b) = (&history[j - 1], &history[j]);
    let span = b.timestamp - a.timestamp;
    let u = if span > 0.0 { (t - a.timestamp) / span } else { 0.0 };
    let l = |x: f64, y: f64| x + (y - x) * u;
    let mut s = *a;
    s.pose.x = l(a.pose.x, b.pose.x);
    s.pose.y = l(a.pose.y, b.pose.y);
    s.pose.heading = lerp_angle(a.pose.heading, b.pose.heading, u);
    s.vel_lon = l(a.vel_lon, b.vel_lon);
    s.vel_lat = l(a.vel_lat, b.vel_lat);
    s.vel_ang = l(a.vel_ang, b.vel_ang);
    s.acc_lon = l(a.acc_lon, b.acc_lon);
    s.acc_lat = l(a.acc_lat, b.acc_lat);
    s.acc_ang = l(a.acc_ang, b.acc_ang);
    s.timestamp = t;
    s
}

/// Path used for the path block: the trajectory's distinct positions, or a
/// ray along the first pose's heading when the trajectory does not move.
fn path_polyline(traj: &Trajectory) -> Result<Polyline> {
    let pos = traj.positions();
    match Polyline::new_dedup(pos.clone(), 1e-6) {
        Ok(p) => Ok(p),
        Err(_) => {
            let first = traj.points().first().ok_or_else(|| NeuralError::Shape("empty planner path".into()))?;
            let o = first.pose.position();
            Ok(Polyline::new(vec![o, o + heading_vec(first.pose.heading)])?)
        }
    }
}

/// Encodes the last 2 s of ego history (ascending timestamps, last entry is
/// the current state) and the planner path in the current ego frame.
pub fn encode_features(history: &[EgoState], planner_path: &Trajectory) -> Result<FeatureVector> {
    let now = history.last().ok_or(NeuralError::ColdStart)?;
    let span = HISTORY_SPACING_S * (HISTORY_FRAMES - 1) as f64;
    if history[0].timestamp > now.timestamp - span + 1e-9 {
        return Err(NeuralError::ColdStart);
    }
    if history.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Err(NeuralError::Shape("history timestamps not ascending".into()));
    }
    let origin = now.pose;
    let mut h = Vec::with_capacity(HISTORY_DIM);
    for i in 0..HISTORY_FRAMES {
        let t = now.timestamp - HISTORY_SPACING_S * (HISTORY_FRAMES - 1 - i) as f64;
        let s = interpolate(history, t);
        let p = s.pose.relative_to(&origin);
        h.extend([
            p.x,
            p.y,
            normalize_angle(p.heading),
            s.vel_lon,
            s.vel_lat,
            s.vel_ang,
            s.acc_lon,
            s.acc_lat,
            s.acc_ang,
        ]);
    }

    let path = path_polyline(planner_path)?;
    let s0 = project_to_path(&path, &origin.position(), origin.heading)?.s;
    let mut p = Vec::with_capacity(PATH_DIM);
    for j in 1..=PATH_POINTS {
        let q: Vec2 = origin.to_local(&path.point_at_extended(s0 + PATH_SPACING_M * j as f64));
        p.extend([q.x, q.y]);
    }
    let f = FeatureVector { history: h, path: p };
    f.validate()?;
    Ok(f)
}
