//! The planner stack run once per planning cycle: route context, sampler,
//! neural refiner and MPT, wired according to the run mode.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::control::ControllerGains;
use super::scenario::{DynamicAgent, Scenario};
use super::{Result, SimError};
use crate::cruise::{plan_cruise_profile, safe_distance, CruiseConfig, CruiseProfile, LeadState};
use crate::geometry::{project_to_path, ConvexPolygon, EgoState, Footprint, Polyline, Trajectory, Vec2};
use crate::lane::{corridor_along, route_centerline, shortest_route, DrivableCorridor, Route};
use crate::mpt::{optimize_trajectory, MptConfig, MptInput, MptResult, PreviousPlan};
use crate::neural::{encode_features, MlpModel};
use crate::qp::QpSettings;
use crate::sampler::{
    forecast_agents, generate_candidates, score_candidates, select_path, AgentObservation, CandidatePath, IdmParams,
    SamplerConfig, Selection,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Hybrid,
    NnOnly,
    OptimizerOnly,
    SampleOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Hybrid, Mode::NnOnly, Mode::OptimizerOnly, Mode::SampleOnly];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Hybrid => "hybrid",
            Mode::NnOnly => "nn_only",
            Mode::OptimizerOnly => "optimizer_only",
            Mode::SampleOnly => "sample_only",
        }
    }

    pub fn uses_model(&self) -> bool {
        matches!(self, Mode::Hybrid | Mode::NnOnly)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode '{s}' (hybrid, nn_only, optimizer_only, sample_only)"))
    }
}

/// Everything tunable in the stack. Any subset may be given in a JSON
/// config file; missing fields keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    pub sampler: SamplerConfig,
    pub idm: IdmParams,
    /// Speed smoothing used by the hybrid stack.
    pub cruise: CruiseConfig,
    /// Speed smoothing of the optimizer-only baseline.
    pub baseline_cruise: CruiseConfig,
    pub mpt: MptConfig,
    pub controller: ControllerGains,
    /// Leads farther than this are ignored.
    pub lead_range: f64,
    /// Lateral slack added to the ego half width when testing lane overlap.
    pub lead_lateral_margin: f64,
    /// Subtracted from the measured gap before speed planning.
    pub gap_buffer: f64,
    pub expert: super::expert::ExpertConfig,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            idm: IdmParams::default(),
            cruise: CruiseConfig::default(),
            baseline_cruise: CruiseConfig { w_a: 0.1, ..CruiseConfig::default() },
            mpt: MptConfig::default(),
            controller: ControllerGains::default(),
            lead_range: 80.0,
            lead_lateral_margin: 0.3,
            gap_buffer: 0.5,
            expert: super::expert::ExpertConfig::default(),
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.cruise.validate()?;
        self.baseline_cruise.validate()?;
        self.mpt.validate()?;
        if self.sampler.steps() != self.mpt.horizon_points || (self.sampler.dt - self.mpt.dt).abs() > 1e-12 {
            return Err(SimError::Config(format!(
                "sampler grid ({} x {}) must match the mpt horizon ({} x {})",
                self.sampler.steps(),
                self.sampler.dt,
                self.mpt.horizon_points,
                self.mpt.dt
            )));
        }
        if !(self.lead_range > 0.0 && self.gap_buffer >= 0.0 && self.lead_lateral_margin >= 0.0) {
            return Err(SimError::Config("lead_range, gap_buffer and lead_lateral_margin out of range".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| SimError::Invalid {
            pointer: format!("/{}", e.path()).replace('.', "/"),
            message: e.into_inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Nearest object ahead in the ego's lane band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadInfo {
    /// Agent id; `None` for the stop point at the end of the route.
    pub id: Option<String>,
    /// Bumper-to-bumper distance along the route.
    pub gap: f64,
    /// Speed along the route.
    pub speed: f64,
}

/// Static context of a scenario: route, centerline, corridor and actors.
#[derive(Debug, Clone)]
pub struct World {
    pub route: Route,
    pub centerline: Polyline,
    pub corridor: DrivableCorridor,
    pub static_obstacles: Vec<ConvexPolygon>,
    pub agents: Vec<DynamicAgent>,
    pub footprint: Footprint,
    /// `(end station, limit)` per route lane.
    limits: Vec<(f64, f64)>,
}

impl World {
    pub fn new(scn: &Scenario) -> Result<Self> {
        let start = scn.start_lane()?;
        let route = shortest_route(&scn.lane_graph, &start, &scn.goal_lane)?;
        let centerline = route_centerline(&scn.lane_graph, &route)?;
        let corridor = corridor_along(&scn.lane_graph, &route, &scn.footprint)?;
        let mut limits = Vec::with_capacity(route.lane_ids.len());
        let mut s = 0.0;
        for id in &route.lane_ids {
            let lane = scn.lane_graph.lane(id)?;
            s += lane.length();
            limits.push((s, lane.speed_limit));
        }
        Ok(Self {
            route,
            centerline,
            corridor,
            static_obstacles: scn.static_obstacles.clone(),
            agents: scn.dynamic_agents.clone(),
            footprint: scn.footprint,
            limits,
        })
    }

    pub fn length(&self) -> f64 {
        self.centerline.length()
    }

    pub fn speed_limit_at(&self, s: f64) -> f64 {
        self.limits
            .iter()
            .find(|(end, _)| s < *end)
            .or(self.limits.last())
            .map_or(1.0, |(_, v)| *v)
    }

    /// Route station and signed lateral offset of a point.
    pub fn station(&self, p: &Vec2) -> Result<(f64, f64)> {
        let f = project_to_path(&self.centerline, p, 0.0)?;
        Ok((f.s, f.d))
    }

    pub fn agent_polygons(&self, t: f64) -> Vec<ConvexPolygon> {
        self.agents.iter().map(|a| a.polygon_at(t)).collect()
    }

    /// Dynamic agents followed by static obstacles as zero-velocity agents.
    pub fn observations(&self, t: f64) -> Vec<AgentObservation> {
        let mut out: Vec<AgentObservation> = self
            .agents
            .iter()
            .map(|a| {
                let polygon = a.polygon_at(t);
                AgentObservation { id: a.id.clone(), position: polygon.centroid(), polygon, velocity: a.velocity_at(t) }
            })
            .collect();
        out.extend(self.static_obstacles.iter().enumerate().map(|(i, p)| AgentObservation {
            id: format!("static_{i}"),
            position: p.centroid(),
            polygon: p.clone(),
            velocity: Vec2::zeros(),
        }));
        out
    }

    /// Nearest dynamic agent ahead whose lateral extent overlaps the ego's
    /// band, or the route end, whichever is closer and within range.
    pub fn find_lead(&self, ego: &EgoState, cfg: &StackConfig) -> Result<Option<LeadInfo>> {
        let (s_ego, d_ego) = self.station(&ego.pose.position())?;
        let front = s_ego + self.footprint.front_overhang();
        let band = 0.5 * self.footprint.width + cfg.lead_lateral_margin;
        let mut best: Option<LeadInfo> = None;
        for a in &self.agents {
            let poly = a.polygon_at(ego.timestamp);
            let mut s_min = f64::INFINITY;
            let (mut d_min, mut d_max) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in poly.vertices() {
                let (s, d) = self.station(v)?;
                s_min = s_min.min(s);
                d_min = d_min.min(d);
                d_max = d_max.max(d);
            }
            if s_min <= s_ego || d_min > d_ego + band || d_max < d_ego - band {
                continue;
            }
            let gap = (s_min - front).max(0.0);
            if gap > cfg.lead_range || best.as_ref().is_some_and(|b| b.gap <= gap) {
                continue;
            }
            let tangent = self.centerline.smooth_heading_at(s_min.min(self.length()));
            let speed = a.velocity_at(ego.timestamp).dot(&crate::geometry::heading_vec(tangent)).max(0.0);
            best = Some(LeadInfo { id: Some(a.id.clone()), gap, speed });
        }
        let end_gap = (self.length() - front).max(0.0);
        if end_gap <= cfg.lead_range && best.as_ref().is_none_or(|b| end_gap < b.gap) {
            best = Some(LeadInfo { id: None, gap: end_gap, speed: 0.0 });
        }
        Ok(best)
    }
}

/// What one planning cycle produced.
#[derive(Debug, Clone)]
pub struct CycleOutput {
    pub candidates: Vec<CandidatePath>,
    pub selection: Selection,
    pub lead: Option<LeadInfo>,
    /// Safe distance to the lead at the current speed.
    pub lead_safe_distance: Option<f64>,
    pub nn_trajectory: Option<Trajectory>,
    pub speed_profile: Option<CruiseProfile>,
    pub mpt: Option<MptResult>,
    /// Trajectory handed to the controller.
    pub active: Trajectory,
}

/// Planner state carried across cycles.
pub struct Planner<'a> {
    world: &'a World,
    cfg: &'a StackConfig,
    mode: Mode,
    model: Option<&'a MlpModel>,
    history: Vec<EgoState>,
    prev: Option<PreviousPlan>,
}

const HISTORY_KEEP: usize = 30;

impl<'a> Planner<'a> {
    pub fn new(world: &'a World, cfg: &'a StackConfig, mode: Mode, model: Option<&'a MlpModel>) -> Result<Self> {
        cfg.validate()?;
        if mode.uses_model() && model.is_none() {
            return Err(SimError::Config(format!("mode {mode} needs a model")));
        }
        Ok(Self { world, cfg, mode, model, history: Vec::new(), prev: None })
    }

    /// Seeds the history with a constant-speed past so the refiner has a
    /// full window from the first cycle.
    pub fn seed_history(&mut self, ego: &EgoState) {
        self.history = super::expert::padded_history(ego, 20);
    }

    pub fn history(&self) -> &[EgoState] {
        &self.history
    }

    /// Runs the sampler alone: lead detection, candidates, scores, selection.
    pub fn sample(&self, ego: &EgoState) -> Result<(Vec<CandidatePath>, Selection, Option<LeadInfo>)> {
        let w = self.world;
        let cfg = self.cfg;
        let lead = w.find_lead(ego, cfg)?;
        let (s_ego, _) = w.station(&ego.pose.position())?;
        // the route end only matters to the sampler once stopping is due
        let v = ego.vel_lon.max(0.0);
        let stop_window = cfg.idm.s0 + v * cfg.idm.t_headway + v * v / (2.0 * cfg.idm.b_comf) + 5.0;
        let lead_state = lead
            .as_ref()
            .filter(|l| l.id.is_some() || l.gap <= stop_window)
            .map(|l| LeadState { gap: l.gap, speed: l.speed });
        let mut cands = generate_candidates(
            &w.centerline,
            ego,
            lead_state.as_ref(),
            w.speed_limit_at(s_ego),
            &cfg.sampler,
            &cfg.idm,
        )?;
        let forecasts = forecast_agents(&w.observations(ego.timestamp), cfg.sampler.horizon_s, cfg.sampler.dt);
        score_candidates(&mut cands, &forecasts, cfg.sampler.dt, &w.corridor, &w.footprint, &cfg.sampler)?;
        let sel = select_path(&cands, &cfg.sampler)?;
        Ok((cands, sel, lead))
    }

    /// One planning cycle at `ego.timestamp`. `steering` is the plant's
    /// current steering angle, used to seed the first optimization.
    pub fn cycle(&mut self, ego: &EgoState, steering: f64) -> Result<CycleOutput> {
        if self.history.is_empty() {
            self.seed_history(ego);
        }
        self.history.push(*ego);
        if self.history.len() > HISTORY_KEEP {
            self.history.drain(..self.history.len() - HISTORY_KEEP);
        }
        let (cands, selection, lead) = self.sample(ego)?;
        let lead_safe_distance = match &lead {
            Some(l) => Some(safe_distance(ego.vel_lon.max(0.0), l.speed, &self.cfg.cruise)?),
            None => None,
        };
        let sel_path = selection_path(&cands, &selection)?;
        let nn_trajectory = match self.mode {
            Mode::Hybrid | Mode::NnOnly => Some(self.refine(ego, &selection.trajectory)?),
            _ => None,
        };
        let mut out = CycleOutput {
            active: selection.trajectory.clone(),
            candidates: cands,
            selection,
            lead,
            lead_safe_distance,
            nn_trajectory,
            speed_profile: None,
            mpt: None,
        };
        match self.mode {
            Mode::SampleOnly => {}
            Mode::NnOnly => out.active = out.nn_trajectory.clone().expect("refined"),
            Mode::Hybrid | Mode::OptimizerOnly => {
                let (reference, cruise_cfg) = if self.mode == Mode::Hybrid {
                    let nn = out.nn_trajectory.as_ref().expect("refined");
                    (extend_with(nn, &sel_path), &self.cfg.cruise)
                } else {
                    (sel_path.clone(), &self.cfg.baseline_cruise)
                };
                let target = self.desired_speed(ego, &out)?;
                let profile = self.speed_profile(ego, &out, target, cruise_cfg)?;
                let res = self.optimize(ego, steering, &reference, &profile, &out.selection)?;
                if !res.used_fallback {
                    self.prev = Some(PreviousPlan {
                        trajectory: res.trajectory.clone(),
                        start_time: res.start_time,
                        cold_start: false,
                    });
                }
                out.active = res.trajectory.clone();
                out.speed_profile = Some(profile);
                out.mpt = Some(res);
            }
        }
        Ok(out)
    }

    /// Cruise target: the selected speed fraction of the road limit. The
    /// lead is left to the speed planner's gap constraint.
    pub fn desired_speed(&self, ego: &EgoState, out: &CycleOutput) -> Result<f64> {
        let (s_ego, _) = self.world.station(&ego.pose.position())?;
        Ok(out.candidates[out.selection.index].speed_fraction * self.world.speed_limit_at(s_ego))
    }

    fn refine(&self, ego: &EgoState, planner: &Trajectory) -> Result<Trajectory> {
        let model = self.model.expect("checked in new");
        let f = encode_features(&self.history, planner)?;
        let local = model.forward(&f, None)?;
        let mut pts = Vec::with_capacity(local.len() + 1);
        pts.push(ego.pose.position());
        pts.extend(local.iter().map(|p| ego.pose.to_world(p)));
        Ok(Trajectory::from_positions(&pts, ego.timestamp, self.cfg.mpt.dt, ego.pose.heading)?)
    }

    fn speed_profile(
        &self,
        ego: &EgoState,
        out: &CycleOutput,
        target: f64,
        cruise: &CruiseConfig,
    ) -> Result<CruiseProfile> {
        let n = self.cfg.mpt.horizon_points;
        let dt = self.cfg.mpt.dt;
        if out.selection.max_brake {
            let traj = &out.selection.trajectory;
            let pts: Vec<_> = (0..n).map(|k| traj.sample(traj.points()[0].t + k as f64 * dt)).collect();
            return Ok(CruiseProfile {
                speeds: pts.iter().map(|p| p.speed).collect(),
                accels: pts.iter().map(|p| p.accel).collect(),
                dt,
                emergency: true,
            });
        }
        let v0 = ego.vel_lon.max(0.0);
        let lead = match out.lead.as_ref() {
            // the buffer is given up before it would force an emergency stop
            Some(l) => {
                let floor = l.gap.min(safe_distance(v0, l.speed, cruise)?);
                Some(LeadState { gap: (l.gap - self.cfg.gap_buffer).max(floor).max(0.0), speed: l.speed })
            }
            None => None,
        };
        let settings = QpSettings { kkt_tol: self.cfg.mpt.kkt_tol, max_iterations: self.cfg.mpt.max_iterations };
        let v_desired = target.clamp(0.0, cruise.v_max);
        Ok(plan_cruise_profile(v0, lead.as_ref(), v_desired, n, dt, cruise, &settings)?)
    }

    fn optimize(
        &mut self,
        ego: &EgoState,
        steering: f64,
        reference: &Polyline,
        profile: &CruiseProfile,
        selection: &Selection,
    ) -> Result<MptResult> {
        let cfg = &self.cfg.mpt;
        if self.prev.is_none() {
            self.prev = Some(cold_start(&selection.trajectory, ego.timestamp, steering, cfg)?);
        }
        let w = self.world;
        let dynamic: Vec<AgentObservation> = w
            .observations(ego.timestamp)
            .into_iter()
            .take(w.agents.len())
            .collect();
        let tracks = forecast_agents(&dynamic, (cfg.horizon_points - 1) as f64 * cfg.dt, cfg.dt);
        let input = MptInput {
            reference,
            corridor: &w.corridor,
            static_obstacles: &w.static_obstacles,
            agent_tracks: &tracks,
            ego,
            footprint: &w.footprint,
            prev: self.prev.as_ref().expect("seeded"),
            speeds: profile,
        };
        Ok(optimize_trajectory(&input, cfg)?)
    }
}

/// Seed plan from the sampler's selection, with the first curvature set to
/// the plant's actual steering.
fn cold_start(traj: &Trajectory, now: f64, steering: f64, cfg: &MptConfig) -> Result<PreviousPlan> {
    let mut pts = traj.points().to_vec();
    let t0 = pts[0].t;
    for p in &mut pts {
        p.t -= t0;
    }
    pts[0].curvature = steering.tan() / cfg.wheelbase;
    Ok(PreviousPlan { trajectory: Trajectory::new(pts, traj.dt())?, start_time: now, cold_start: true })
}

/// Geometric path of the selection: the chosen candidate's path, or the
/// zero-offset path when the maximum-brake override fired.
pub fn selection_path(cands: &[CandidatePath], sel: &Selection) -> Result<Polyline> {
    let c = if sel.max_brake {
        cands
            .iter()
            .filter(|c| c.lateral_offset == 0.0)
            .max_by(|a, b| a.speed_fraction.total_cmp(&b.speed_fraction))
            .unwrap_or(&cands[sel.index])
    } else {
        &cands[sel.index]
    };
    match &c.path {
        Some(p) => Ok(p.clone()),
        None => Ok(Polyline::new_dedup(c.trajectory.positions(), 1e-6)?),
    }
}

/// Spacing of the conditioned network path.
const NN_PATH_SPACING: f64 = 1.0;

/// Network waypoints as a drivable path: decimated to about 1 m, with
/// points that stall or double back dropped and a 5-point moving average
/// over the interior. The first point stays put.
pub fn condition_path(pts: &[Vec2]) -> Vec<Vec2> {
    let mut kept: Vec<Vec2> = Vec::with_capacity(pts.len());
    for &p in pts {
        let n = kept.len();
        if n == 0 {
            kept.push(p);
            continue;
        }
        let step = p - kept[n - 1];
        if step.norm() < NN_PATH_SPACING {
            continue;
        }
        if n >= 2 && step.dot(&(kept[n - 1] - kept[n - 2])) <= 0.0 {
            continue;
        }
        kept.push(p);
    }
    let n = kept.len();
    (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                return kept[i];
            }
            let h = i.min(n - 1 - i).min(2);
            let sum = kept[i - h..=i + h].iter().fold(Vec2::zeros(), |a, b| a + b);
            sum / (2 * h + 1) as f64
        })
        .collect()
}

/// The refined trajectory's path continued by `tail` beyond the point
/// where it ends. Falls back to `tail` when the trajectory barely moves.
pub fn extend_with(traj: &Trajectory, tail: &Polyline) -> Polyline {
    let head = match Polyline::new_dedup(condition_path(&traj.positions()), 0.05) {
        Ok(p) if p.length() > 1.0 => p,
        _ => return tail.clone(),
    };
    let end = *head.vertices().last().expect("non-empty");
    let Ok(f) = project_to_path(tail, &end, 0.0) else {
        return head;
    };
    let mut v = head.vertices().to_vec();
    let arc = tail.arc_lengths();
    v.extend(
        tail.vertices()
            .iter()
            .zip(arc)
            .filter(|(_, &s)| s > f.s + NN_PATH_SPACING)
            .map(|(p, _)| *p),
    );
    Polyline::new_dedup(v, 0.05).unwrap_or(head)
}
