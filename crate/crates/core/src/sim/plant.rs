//! Kinematic bicycle plant integrated with classical RK4.

use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, Pose2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// Rear-axle pose.
    pub pose: Pose2D,
    pub speed: f64,
    pub steering: f64,
    pub wheelbase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub accel: f64,
    pub steering_rate: f64,
}

fn deriv(s: [f64; 4], accel: f64, tan_delta: f64, l: f64) -> [f64; 4] {
    let [_, _, th, v] = s;
    [v * th.cos(), v * th.sin(), v * tan_delta / l, accel]
}

fn rk4(s: [f64; 4], accel: f64, tan_delta: f64, l: f64, h: f64) -> [f64; 4] {
    let add = |a: [f64; 4], b: [f64; 4], k: f64| [a[0] + k * b[0], a[1] + k * b[1], a[2] + k * b[2], a[3] + k * b[3]];
    let k1 = deriv(s, accel, tan_delta, l);
    let k2 = deriv(add(s, k1, h / 2.0), accel, tan_delta, l);
    let k3 = deriv(add(s, k2, h / 2.0), accel, tan_delta, l);
    let k4 = deriv(add(s, k3, h), accel, tan_delta, l);
    let mut out = s;
    for i in 0..4 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Advances the plant by `dt`. Steering is integrated first and clamped to
/// `±delta_max`, then held over the step. A deceleration that would reverse
/// the vehicle stops it exactly at standstill.
pub fn step_plant(s: &PlantState, cmd: Command, dt: f64, delta_max: f64) -> PlantState {
    let steering = (s.steering + cmd.steering_rate * dt).clamp(-delta_max, delta_max);
    let tan_d = steering.tan();
    let v0 = s.speed.max(0.0);
    // time until standstill under the commanded deceleration
    let h = if cmd.accel < 0.0 { dt.min(v0 / -cmd.accel) } else { dt };
    let x = [s.pose.x, s.pose.y, s.pose.heading, v0];
    let y = if h > 0.0 { rk4(x, cmd.accel, tan_d, s.wheelbase, h) } else { x };
    let speed = if h < dt { 0.0 } else { y[3].max(0.0) };
    PlantState {
        pose: Pose2D::new(y[0], y[1], normalize_angle(y[2])),
        speed,
        steering,
        wheelbase: s.wheelbase,
    }
}
