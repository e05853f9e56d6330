//! Pure-pursuit path tracking with proportional speed control.

use serde::{Deserialize, Serialize};

use super::plant::{Command, PlantState};
use crate::geometry::{heading_vec, Trajectory, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerGains {
    pub lookahead_base: f64,
    pub lookahead_time: f64,
    pub k_speed: f64,
    /// Inverse time constant of the steering servo, 1/s.
    pub k_steer: f64,
    pub max_steer_rate: f64,
    pub delta_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    /// Braking used once the vehicle has run past the trajectory end.
    pub stop_decel: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            lookahead_base: 1.5,
            lookahead_time: 0.25,
            k_speed: 1.5,
            k_steer: 10.0,
            max_steer_rate: 1.0,
            delta_max: 0.6,
            a_min: -6.0,
            a_max: 3.0,
            stop_decel: 2.0,
        }
    }
}

/// Closest trajectory location to `p`: segment index, fraction along it
/// (unclamped past the final segment) and distance along the path.
fn closest(traj: &Trajectory, p: &Vec2) -> Option<(usize, f64, f64)> {
    let pts = traj.points();
    let mut best: Option<(f64, usize, f64, f64)> = None;
    let mut s_acc = 0.0;
    for i in 0..pts.len() - 1 {
        let a = pts[i].pose.position();
        let seg = pts[i + 1].pose.position() - a;
        let len2 = seg.norm_squared();
        if len2 < 1e-12 {
            continue;
        }
        let raw = (p - a).dot(&seg) / len2;
        let u = raw.clamp(0.0, 1.0);
        let d2 = (p - (a + seg * u)).norm_squared();
        if best.is_none_or(|b| d2 < b.0 - 1e-12) {
            best = Some((d2, i, u, s_acc + u * len2.sqrt()));
        }
        s_acc += len2.sqrt();
    }
    best.map(|(_, i, u, s)| (i, u, s))
}

/// Point `s` meters along the trajectory path, continued straight past the end.
fn point_along(traj: &Trajectory, s: f64) -> Vec2 {
    let pts = traj.points();
    let mut acc = 0.0;
    let mut last_dir = heading_vec(pts[0].pose.heading);
    for w in pts.windows(2) {
        let a = w[0].pose.position();
        let seg = w[1].pose.position() - a;
        let len = seg.norm();
        if len < 1e-6 {
            continue;
        }
        if acc + len >= s {
            return a + seg * ((s - acc) / len);
        }
        acc += len;
        last_dir = seg / len;
    }
    pts[pts.len() - 1].pose.position() + last_dir * (s - acc)
}

/// One control command toward `traj`. Steering follows a speed-scaled
/// lookahead point; acceleration is the reference feedforward plus a
/// proportional speed correction.
pub fn track_trajectory(s: &PlantState, traj: &Trajectory, g: &ControllerGains) -> Command {
    let pts = traj.points();
    let pos = s.pose.position();
    let steer_toward = |target: f64| {
        let rate = g.k_steer * (target.clamp(-g.delta_max, g.delta_max) - s.steering);
        rate.clamp(-g.max_steer_rate, g.max_steer_rate)
    };
    let Some((i, u, s_here)) = closest(traj, &pos) else {
        // trajectory does not move: hold position
        let accel = if s.speed > 0.0 { -g.stop_decel } else { 0.0 };
        return Command { accel, steering_rate: steer_toward(0.0) };
    };
    let a = pts[i].pose.position();
    let b = pts[i + 1].pose.position();
    let past_end = i + 2 == pts.len() && (pos - a).dot(&(b - a)) > (b - a).norm_squared();
    if past_end {
        let accel = if s.speed > 0.0 { -g.stop_decel } else { 0.0 };
        return Command { accel, steering_rate: steer_toward(0.0) };
    }
    let v_ref = pts[i].speed + u * (pts[i + 1].speed - pts[i].speed);
    let a_ref = pts[i].accel + u * (pts[i + 1].accel - pts[i].accel);
    let ld = g.lookahead_base + g.lookahead_time * s.speed.max(0.0);
    let target = point_along(traj, s_here + ld);
    let local = s.pose.to_local(&target);
    let dist2 = local.norm_squared().max(1e-9);
    let delta_des = (2.0 * s.wheelbase * local.y / dist2).atan();
    let accel = (a_ref + g.k_speed * (v_ref - s.speed)).clamp(g.a_min, g.a_max);
    let accel = if v_ref <= 1e-6 && a_ref <= 0.0 && s.speed <= 1e-6 { 0.0 } else { accel };
    Command { accel, steering_rate: steer_toward(delta_des) }
}
