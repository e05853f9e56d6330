//! Demonstration driver for imitation data. It follows the sampler's
//! choice but cuts toward the inside of curves and eases off on tight
//! bends, then its closed-loop motion becomes the regression target.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::control::track_trajectory;
use super::plant::{step_plant, PlantState};
use super::run::{PLANNER_DT, PLANT_SUBSTEPS};
use super::scenario::Scenario;
use super::stack::{selection_path, Mode, Planner, StackConfig, World};
use super::Result;
use crate::cruise::{plan_cruise_profile, LeadState};
use crate::geometry::{curvature_profile, EgoState, Polyline, Trajectory, Vec2};
use crate::neural::mlp::OUTPUT_WAYPOINTS;
use crate::neural::{encode_features, TrainingSample};
use crate::qp::QpSettings;
use crate::sampler::trajectory_along;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    /// Share of the free room on the inside of a bend that is used.
    pub cut_fraction: f64,
    /// Curvature where cutting starts and where it is fully applied.
    pub kappa_start: f64,
    pub kappa_full: f64,
    /// Half window for smoothing the cut weight along the route.
    pub smoothing_m: f64,
    /// Distance over which the expert converges onto its lateral target.
    pub blend_m: f64,
    pub max_lat_accel: f64,
    /// How far ahead curvature limits the desired speed.
    pub preview_m: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            cut_fraction: 0.4,
            kappa_start: 0.015,
            kappa_full: 0.025,
            smoothing_m: 8.0,
            blend_m: 10.0,
            max_lat_accel: 2.0,
            preview_m: 30.0,
        }
    }
}

/// Route-station tables the expert needs, on the centerline's 0.5 m grid.
pub struct ExpertMap {
    stations: Vec<f64>,
    /// Signed cut weight in [-1, 1]; positive cuts to the left.
    weight: Vec<f64>,
    kappa: Vec<f64>,
}

fn window_mean(x: &[f64], half: usize) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

impl ExpertMap {
    pub fn new(world: &World, cfg: &ExpertConfig) -> Result<Self> {
        let line = &world.centerline;
        let stations = line.arc_lengths().to_vec();
        let spacing = stations[1] - stations[0];
        let half = (cfg.smoothing_m / spacing).round() as usize;
        let kappa = window_mean(&curvature_profile(line)?, 4);
        let raw: Vec<f64> = kappa
            .iter()
            .map(|k| {
                let w = ((k.abs() - cfg.kappa_start) / (cfg.kappa_full - cfg.kappa_start)).clamp(0.0, 1.0);
                w * k.signum()
            })
            .collect();
        Ok(Self { weight: window_mean(&raw, half), kappa, stations })
    }

    fn lookup(&self, x: &[f64], s: f64) -> f64 {
        let st = &self.stations;
        if s <= st[0] {
            return x[0];
        }
        let i = st.partition_point(|a| *a <= s);
        if i >= st.len() {
            return x[x.len() - 1];
        }
        let u = (s - st[i - 1]) / (st[i] - st[i - 1]);
        x[i - 1] + u * (x[i] - x[i - 1])
    }

    /// Lateral target at station `s` for a nominal offset.
    pub fn target_offset(&self, world: &World, s: f64, nominal: f64, cfg: &ExpertConfig) -> f64 {
        let w = self.lookup(&self.weight, s);
        let (left, right) = world.corridor.limits_at(s);
        let room = if w > 0.0 { left - nominal } else { nominal - right };
        nominal + w * cfg.cut_fraction * room.max(0.0)
    }

    /// Speed cap from the sharpest curvature within the preview distance.
    pub fn curve_speed(&self, s: f64, cfg: &ExpertConfig) -> f64 {
        let mut k_max: f64 = 0.0;
        let mut x = s;
        while x <= s + cfg.preview_m {
            k_max = k_max.max(self.lookup(&self.kappa, x).abs());
            x += 1.0;
        }
        if k_max < 1e-6 {
            f64::INFINITY
        } else {
            (cfg.max_lat_accel / k_max).sqrt()
        }
    }
}

/// Expert path from the ego: blends from the current lateral offset to
/// the cut target over `blend_m`.
pub fn expert_path(
    world: &World,
    map: &ExpertMap,
    ego: &EgoState,
    nominal: f64,
    length: f64,
    cfg: &ExpertConfig,
) -> Result<Polyline> {
    let (s0, d0) = world.station(&ego.pose.position())?;
    let line = &world.centerline;
    let n = (length / 0.5).ceil() as usize + 1;
    let pts: Vec<Vec2> = (0..n)
        .map(|i| {
            let ds = i as f64 * 0.5;
            let s = s0 + ds;
            let u = (ds / cfg.blend_m).min(1.0);
            let sigma = u * u * (3.0 - 2.0 * u);
            let d = d0 + (map.target_offset(world, s, nominal, cfg) - d0) * sigma;
            let h = line.smooth_heading_at(s.clamp(0.0, line.length()));
            line.point_at_extended(s) + Vec2::new(-h.sin(), h.cos()) * d
        })
        .collect();
    Ok(Polyline::new_dedup(pts, 1e-6)?)
}

/// One expert planning step.
#[derive(Debug, Clone)]
pub struct ExpertTick {
    pub ego: EgoState,
    /// The sampler's selection at this tick.
    pub planner: Trajectory,
    pub plan: Trajectory,
}

/// Drives a scenario with the expert and records every planning tick.
pub fn run_expert(scn: &Scenario, world: &World, cfg: &StackConfig) -> Result<Vec<ExpertTick>> {
    let planner = Planner::new(world, cfg, Mode::SampleOnly, None)?;
    let map = ExpertMap::new(world, &cfg.expert)?;
    let ecfg = &cfg.expert;
    let n = cfg.mpt.horizon_points;
    let dt = cfg.mpt.dt;
    let settings = QpSettings { kkt_tol: cfg.mpt.kkt_tol, max_iterations: cfg.mpt.max_iterations };
    let mut plant = PlantState {
        pose: scn.ego_start.pose,
        speed: scn.ego_start.vel_lon.max(0.0),
        steering: 0.0,
        wheelbase: scn.footprint.wheelbase,
    };
    let sub_dt = PLANNER_DT / PLANT_SUBSTEPS as f64;
    let mut before = plant;
    let cycles = (scn.duration_s / PLANNER_DT).round() as usize;
    let mut out = Vec::with_capacity(cycles + 1);
    for k in 0..=cycles {
        let t = k as f64 * PLANNER_DT;
        let r = plant.speed * plant.steering.tan() / plant.wheelbase;
        let r_before = before.speed * before.steering.tan() / before.wheelbase;
        let ego = EgoState {
            pose: plant.pose,
            vel_lon: plant.speed,
            vel_lat: 0.0,
            vel_ang: r,
            acc_lon: if k == 0 { scn.ego_start.acc_lon } else { (plant.speed - before.speed) / sub_dt },
            acc_lat: plant.speed * r,
            acc_ang: if k == 0 { 0.0 } else { (r - r_before) / sub_dt },
            timestamp: t,
        };
        let (cands, sel, lead) = planner.sample(&ego)?;
        let (s_ego, _) = world.station(&ego.pose.position())?;
        let nominal = if sel.max_brake { 0.0 } else { cands[sel.index].lateral_offset };
        let reach = selection_path(&cands, &sel)?.length().max(ego.vel_lon * cfg.sampler.horizon_s + 20.0);
        let path = expert_path(world, &map, &ego, nominal, reach, ecfg)?;
        let profile = if sel.max_brake {
            let tr = &sel.trajectory;
            let pts: Vec<_> = (0..n).map(|i| tr.sample(tr.points()[0].t + i as f64 * dt)).collect();
            (pts.iter().map(|p| p.speed).collect::<Vec<_>>(), pts.iter().map(|p| p.accel).collect::<Vec<_>>())
        } else {
            let target = (cands[sel.index].speed_fraction * world.speed_limit_at(s_ego))
                .min(map.curve_speed(s_ego, ecfg))
                .min(cfg.cruise.v_max);
            let lead = lead.as_ref().map(|l| LeadState { gap: (l.gap - cfg.gap_buffer).max(0.0), speed: l.speed });
            let p = plan_cruise_profile(ego.vel_lon.max(0.0), lead.as_ref(), target, n, dt, &cfg.cruise, &settings)?;
            (p.speeds, p.accels)
        };
        let (vs, accs) = profile;
        let mut ss = Vec::with_capacity(n);
        let mut s = 0.0;
        for i in 0..n {
            ss.push(s);
            let v_next = (vs[i] + accs[i] * dt).max(0.0);
            s += 0.5 * (vs[i] + v_next) * dt;
        }
        let plan = trajectory_along(&path, &ss, &vs, &accs, dt)?;
        out.push(ExpertTick { ego, planner: sel.trajectory.clone(), plan: plan.clone() });
        if k == cycles {
            break;
        }
        for _ in 0..PLANT_SUBSTEPS {
            let cmd = track_trajectory(&plant, &plan, &cfg.controller);
            before = plant;
            plant = step_plant(&plant, cmd, sub_dt, cfg.controller.delta_max);
        }
    }
    Ok(out)
}

/// Constant-speed past leading up to `ego`, 0.1 s apart, oldest first.
pub fn padded_history(ego: &EgoState, count: usize) -> Vec<EgoState> {
    let dir = crate::geometry::heading_vec(ego.pose.heading);
    (1..=count)
        .rev()
        .map(|k| {
            let back = k as f64 * PLANNER_DT;
            let p = ego.pose.position() - dir * (ego.vel_lon * back);
            let mut s = *ego;
            s.pose.x = p.x;
            s.pose.y = p.y;
            s.acc_lon = 0.0;
            s.acc_ang = 0.0;
            s.timestamp = ego.timestamp - back;
            s
        })
        .collect()
}

/// Training pair at tick `k` of an expert run: features from the history
/// and the sampler's selection, target the expert's next 8 s of motion.
pub fn sample_at(ticks: &[ExpertTick], k: usize) -> Result<Option<TrainingSample>> {
    if k + OUTPUT_WAYPOINTS >= ticks.len() {
        return Ok(None);
    }
    let ego = ticks[k].ego;
    let mut history = padded_history(&ticks[0].ego, 20);
    history.extend(ticks[..=k].iter().map(|t| t.ego));
    let features = encode_features(&history, &ticks[k].planner)?;
    let target = ticks[k + 1..=k + OUTPUT_WAYPOINTS]
        .iter()
        .map(|t| ego.pose.to_local(&t.ego.pose.position()))
        .collect();
    let pl = &ticks[k].planner;
    let t0 = pl.points()[0].t;
    let planner = (1..=OUTPUT_WAYPOINTS)
        .map(|i| ego.pose.to_local(&pl.sample(t0 + i as f64 * PLANNER_DT).pose.position()))
        .collect();
    Ok(Some(TrainingSample { features, target, planner }))
}

/// Runs the expert on every scenario and draws `n` distinct anchor ticks
/// at random (all of them if fewer exist).
pub fn generate_dataset(scenarios: &[Scenario], n: usize, seed: u64, cfg: &StackConfig) -> Result<Vec<TrainingSample>> {
    let mut runs = Vec::with_capacity(scenarios.len());
    for scn in scenarios {
        let world = World::new(scn)?;
        runs.push(run_expert(scn, &world, cfg)?);
    }
    let mut anchors: Vec<(usize, usize)> = runs
        .iter()
        .enumerate()
        .flat_map(|(r, ticks)| (0..ticks.len().saturating_sub(OUTPUT_WAYPOINTS)).map(move |k| (r, k)))
        .collect();
    if anchors.len() < n {
        log::warn!("only {} anchor ticks available, {n} requested", anchors.len());
    }
    anchors.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    anchors.truncate(n);
    anchors.sort_unstable();
    let mut out = Vec::with_capacity(anchors.len());
    for (r, k) in anchors {
        if let Some(s) = sample_at(&runs[r], k)? {
            out.push(s);
        }
    }
    Ok(out)
}
