//! Safety, progress and comfort metrics recomputed from a trace.

use serde::{Deserialize, Serialize};

use super::run::SimTrace;
use super::scenario::Scenario;
use super::stack::World;
use super::{Result, SimError};
use crate::geometry::footprint_collides;

/// Distance short of the route end that still counts as arrived.
pub const GOAL_TOLERANCE_M: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ticks: usize,
    /// Ticks with the footprint overlapping an obstacle or agent.
    pub collisions: usize,
    /// Ticks with the footprint outside the drivable corridor.
    pub boundary_violations: usize,
    pub progress_m: f64,
    pub peak_jerk: f64,
    pub peak_lat_accel: f64,
    pub peak_lat_jerk: f64,
    /// Smallest gap minus safe distance over ticks following an agent.
    pub min_gap_vs_safe_distance: Option<f64>,
    /// Smallest footprint margin to the corridor bounds.
    pub min_boundary_margin: f64,
    pub completion: bool,
    pub fallback_cycles: usize,
    pub max_kkt_residual: Option<f64>,
    pub max_pin_error: Option<f64>,
    pub failure: Option<String>,
}

fn max_opt(acc: Option<f64>, x: Option<f64>) -> Option<f64> {
    match (acc, x) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    }
}

pub fn compute_metrics(trace: &SimTrace, scn: &Scenario) -> Result<MetricsReport> {
    let world = World::new(scn)?;
    metrics_in(trace, &world)
}

pub fn metrics_in(trace: &SimTrace, world: &World) -> Result<MetricsReport> {
    let ticks = &trace.ticks;
    if ticks.is_empty() {
        return Err(SimError::Format("empty trace".into()));
    }
    let fp = &world.footprint;
    let mut collisions = 0;
    let mut boundary_violations = 0;
    let mut min_margin = f64::INFINITY;
    let mut min_gap: Option<f64> = None;
    let mut fallback_cycles = 0;
    let (mut max_kkt, mut max_pin) = (None, None);
    for tk in ticks {
        let pose = &tk.plant.pose;
        let mut obstacles = world.agent_polygons(tk.t);
        obstacles.extend(world.static_obstacles.iter().cloned());
        if footprint_collides(pose, fp, &obstacles) {
            collisions += 1;
        }
        let m = world.corridor.footprint_margin(pose, fp);
        min_margin = min_margin.min(m);
        if m < -1e-6 {
            boundary_violations += 1;
        }
        if let Some(l) = tk.lead.as_ref().filter(|l| l.id.is_some()) {
            let g = l.gap - l.safe_distance;
            min_gap = Some(min_gap.map_or(g, |x: f64| x.min(g)));
        }
        if tk.used_fallback == Some(true) {
            fallback_cycles += 1;
        }
        max_kkt = max_opt(max_kkt, tk.kkt_residual);
        max_pin = max_opt(max_pin, tk.pin_error);
    }

    let dt = if ticks.len() > 1 { ticks[1].t - ticks[0].t } else { 1.0 };
    let v: Vec<f64> = ticks.iter().map(|t| t.plant.speed).collect();
    let peak_jerk = v
        .windows(3)
        .map(|w| ((w[2] - 2.0 * w[1] + w[0]) / (dt * dt)).abs())
        .fold(0.0, f64::max);
    let lat: Vec<f64> = ticks
        .iter()
        .map(|t| t.plant.speed * t.plant.speed * t.plant.steering.tan() / t.plant.wheelbase)
        .collect();
    let peak_lat_accel = lat.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let peak_lat_jerk = lat.windows(2).map(|w| ((w[1] - w[0]) / dt).abs()).fold(0.0, f64::max);

    let s_first = world.station(&ticks[0].plant.pose.position())?.0;
    let s_last = world.station(&ticks[ticks.len() - 1].plant.pose.position())?.0;
    Ok(MetricsReport {
        ticks: ticks.len(),
        collisions,
        boundary_violations,
        progress_m: s_last - s_first,
        peak_jerk,
        peak_lat_accel,
        peak_lat_jerk,
        min_gap_vs_safe_distance: min_gap,
        min_boundary_margin: min_margin,
        completion: trace.failure.is_none() && s_last >= world.length() - GOAL_TOLERANCE_M,
        fallback_cycles,
        max_kkt_residual: max_kkt,
        max_pin_error: max_pin,
        failure: trace.failure.as_ref().map(|f| f.message.clone()),
    })
}
