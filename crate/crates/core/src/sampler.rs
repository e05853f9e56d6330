//! Sample-based candidate planner: IDM speed policies times lateral offsets,
//! simulated against forecast agents, scored, and selected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cruise::LeadState;
use crate::geometry::{
    footprint_collides, project_to_path, ConvexPolygon, EgoState, Footprint, GeometryError,
    Polyline, Pose2D, Trajectory, TrajectoryPoint, Vec2,
};
use crate::lane::DrivableCorridor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("non-positive target speed {0}")]
    NonPositiveTarget(f64),
    #[error("invalid sampler input: {0}")]
    InvalidInput(String),
    #[error("dt mismatch: trajectory {traj} vs forecast {forecast}")]
    DtMismatch { traj: f64, forecast: f64 },
    #[error("no candidates")]
    NoCandidates,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    pub a_max: f64,
    pub b_comf: f64,
    pub s0: f64,
    pub t_headway: f64,
    pub delta_exp: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            a_max: 1.5,
            b_comf: 2.0,
            s0: 2.0,
            t_headway: 1.5,
            delta_exp: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub speed_fractions: Vec<f64>,
    pub lateral_offsets_m: Vec<f64>,
    pub horizon_s: f64,
    pub dt: f64,
    pub collision_check_window_s: f64,
    pub max_brake: f64,
    pub jerk_max: f64,
    pub acc_max: f64,
    /// Distance over which a candidate blends from the ego's lateral
    /// position to its offset.
    pub offset_blend_m: f64,
    /// Lower bound on the effective speed limit, so a stopped lead still
    /// yields valid IDM targets.
    pub min_speed_limit: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            speed_fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            lateral_offsets_m: vec![1.0, -1.0, 0.0],
            horizon_s: 8.0,
            dt: 0.1,
            collision_check_window_s: 2.0,
            max_brake: 6.0,
            jerk_max: 4.0,
            acc_max: 3.0,
            offset_blend_m: 12.0,
            min_speed_limit: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn steps(&self) -> usize {
        (self.horizon_s / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.speed_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(SamplerError::InvalidInput("fractions must lie in (0, 1]".into()));
        }
        if !(self.horizon_s > self.collision_check_window_s) || !(self.dt > 0.0) {
            return Err(SamplerError::InvalidInput("horizon must exceed the collision window".into()));
        }
        if !(self.max_brake > 0.0) {
            return Err(SamplerError::InvalidInput("max_brake must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub at_fault_collision: bool,
    pub time_to_collision_s: Option<f64>,
    pub drivable_compliance: f64,
    pub progress_m: f64,
    pub comfort: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePath {
    pub trajectory: Trajectory,
    pub speed_fraction: f64,
    pub lateral_offset: f64,
    /// Policy target speed of the IDM profile.
    pub target_speed: f64,
    pub score: CandidateScore,
    #[serde(skip)]
    pub path: Option<Polyline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub id: String,
    pub polygon: ConvexPolygon,
    pub position: Vec2,
    pub velocity: Vec2,
}

/// Standard IDM acceleration, clamped to `[-max_brake, a_max]`.
pub fn idm_acceleration(
    v: f64,
    v_target: f64,
    gap: f64,
    closing_speed: f64,
    p: &IdmParams,
    max_brake: f64,
) -> Result<f64> {
    if !(v_target > 0.0) {
        return Err(SamplerError::NonPositiveTarget(v_target));
    }
    let free = 1.0 - (v.max(0.0) / v_target).powf(p.delta_exp);
    let interaction = if gap.is_infinite() {
        0.0
    } else {
        let s_star = p.s0 + v * p.t_headway + v * closing_speed / (2.0 * (p.a_max * p.b_comf).sqrt());
        let g = gap.max(1e-3);
        (s_star.max(0.0) / g).powi(2)
    };
    Ok((p.a_max * (free - interaction)).clamp(-max_brake, p.a_max))
}

/// Constant-velocity extrapolation; every track has `horizon/dt + 1` polygons.
pub fn forecast_agents(observations: &[AgentObservation], horizon_s: f64, dt: f64) -> Vec<Vec<ConvexPolygon>> {
    let n = (horizon_s / dt).round() as usize + 1;
    observations
        .iter()
        .map(|o| {
            (0..n)
                .map(|k| o.polygon.translated(&(o.velocity * (k as f64 * dt))))
                .collect()
        })
        .collect()
}

/// Speeds and travelled distance of an IDM policy. Each step holds the
/// acceleration constant and stops exactly at zero speed.
pub fn integrate_idm(
    v0: f64,
    v_target: f64,
    lead: Option<&LeadState>,
    steps: usize,
    dt: f64,
    p: &IdmParams,
    max_brake: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut v = v0.max(0.0);
    let mut s = 0.0;
    let mut gap = lead.map(|l| l.gap);
    let (mut vs, mut ss, mut accs) = (Vec::with_capacity(steps), Vec::with_capacity(steps), Vec::with_capacity(steps));
    for _ in 0..steps {
        let (g, closing) = match (gap, lead) {
            (Some(g), Some(l)) => (g, v - l.speed),
            _ => (f64::INFINITY, 0.0),
        };
        let a = idm_acceleration(v, v_target, g, closing, p, max_brake)?;
        vs.push(v);
        ss.push(s);
        let mut v_next = v + a * dt;
        let ds = if v_next < 0.0 {
            // stops inside the step
            v_next = 0.0;
            if a < 0.0 { v * v / (-2.0 * a) } else { 0.0 }
        } else {
            if v <= v_target {
                v_next = v_next.min(v_target);
            }
            0.5 * (v + v_next) * dt
        };
        accs.push((v_next - v) / dt);
        s += ds;
        if let (Some(g), Some(l)) = (gap.as_mut(), lead) {
            *g += l.speed * dt - ds;
        }
        v = v_next;
    }
    Ok((vs, ss, accs))
}

/// Geometric path of a candidate: the centerline shifted by `offset`,
/// blended smoothly from the ego's current lateral position.
pub fn offset_path(centerline: &Polyline, ego: &Pose2D, offset: f64, length: f64, blend: f64) -> Result<Polyline> {
    let f = project_to_path(centerline, &ego.position(), ego.heading)?;
    let step = 0.5;
    let n = (length / step).ceil() as usize + 1;
    let pts: Vec<Vec2> = (0..n)
        .map(|i| {
            let ds = i as f64 * step;
            let u = (ds / blend).min(1.0);
            let smooth = u * u * (3.0 - 2.0 * u);
            let d = f.d + (offset - f.d) * smooth;
            let s = f.s + ds;
            let h = heading_extended(centerline, s);
            centerline.point_at_extended(s) + Vec2::new(-h.sin(), h.cos()) * d
        })
        .collect();
    Ok(Polyline::new_dedup(pts, 1e-6)?)
}

fn heading_extended(path: &Polyline, s: f64) -> f64 {
    path.smooth_heading_at(s.clamp(0.0, path.length()))
}

/// Trajectory that travels the distances `ss` along `path`, with the given
/// speeds and accelerations.
pub fn trajectory_along(path: &Polyline, ss: &[f64], vs: &[f64], accs: &[f64], dt: f64) -> Result<Trajectory> {
    let n = ss.len();
    let points: Vec<TrajectoryPoint> = (0..n)
        .map(|k| {
            let s = ss[k];
            let p = path.point_at_extended(s);
            let h = heading_extended(path, s);
            // curvature from the heading change over one meter
            let kappa = crate::geometry::normalize_angle(
                heading_extended(path, s + 0.5) - heading_extended(path, s - 0.5),
            );
            TrajectoryPoint {
                pose: Pose2D::new(p.x, p.y, h),
                t: k as f64 * dt,
                speed: vs[k],
                accel: accs[k],
                curvature: kappa,
            }
        })
        .collect();
    Ok(Trajectory::new(points, dt)?)
}

/// Builds the full candidate grid. `speed_limit` is replaced by the lead's
/// speed when a lead exists.
pub fn generate_candidates(
    centerline: &Polyline,
    ego: &EgoState,
    lead: Option<&LeadState>,
    speed_limit: f64,
    cfg: &SamplerConfig,
    idm: &IdmParams,
) -> Result<Vec<CandidatePath>> {
    cfg.validate()?;
    if centerline.len() < 2 {
        return Err(GeometryError::DegeneratePath.into());
    }
    let limit = lead.map_or(speed_limit, |l| l.speed).max(cfg.min_speed_limit);
    let steps = cfg.steps();
    let v0 = ego.vel_lon.max(0.0);
    let reach = v0.max(limit) * cfg.horizon_s + 20.0;
    let mut out = Vec::with_capacity(cfg.speed_fractions.len() * cfg.lateral_offsets_m.len());
    for &offset in &cfg.lateral_offsets_m {
        let path = offset_path(centerline, &ego.pose, offset, reach, cfg.offset_blend_m)?;
        for &fraction in &cfg.speed_fractions {
            let target = fraction * limit;
            let (vs, ss, accs) = integrate_idm(v0, target, lead, steps, cfg.dt, idm, cfg.max_brake)?;
            let trajectory = trajectory_along(&path, &ss, &vs, &accs, cfg.dt)?;
            out.push(CandidatePath {
                trajectory,
                speed_fraction: fraction,
                lateral_offset: offset,
                target_speed: target,
                score: CandidateScore {
                    at_fault_collision: false,
                    time_to_collision_s: None,
                    drivable_compliance: 0.0,
                    progress_m: 0.0,
                    comfort: 0.0,
                    total: 0.0,
                },
                path: Some(path.clone()),
            });
        }
    }
    Ok(out)
}

/// Raw metrics of one candidate; `total` is normalized against
/// `progress_ref`, the best progress in the candidate set.
pub fn score_candidate(
    c: &CandidatePath,
    forecasts: &[Vec<ConvexPolygon>],
    forecast_dt: f64,
    corridor: &DrivableCorridor,
    fp: &Footprint,
    progress_ref: Option<f64>,
    cfg: &SamplerConfig,
) -> Result<CandidateScore> {
    let traj = &c.trajectory;
    if (traj.dt() - forecast_dt).abs() > 1e-9 {
        return Err(SamplerError::DtMismatch {
            traj: traj.dt(),
            forecast: forecast_dt,
        });
    }
    let pts = traj.points();
    let mut ttc = None;
    for (k, p) in pts.iter().enumerate() {
        let hit = forecasts
            .iter()
            .filter_map(|track| track.get(k).or(track.last()))
            .any(|poly| footprint_collides(&p.pose, fp, std::slice::from_ref(poly)));
        if hit {
            ttc = Some(k as f64 * traj.dt());
            break;
        }
    }
    let inside = pts.iter().filter(|p| corridor.footprint_inside(&p.pose, fp)).count();
    let compliance = inside as f64 / pts.len() as f64;
    // progress stops counting at the first predicted contact
    let end = ttc.map_or(pts.len() - 1, |t| (t / traj.dt()).round() as usize);
    let progress: f64 = pts[..=end]
        .windows(2)
        .map(|w| (w[1].pose.position() - w[0].pose.position()).norm())
        .sum();
    let comfortable = (0..pts.len())
        .filter(|&k| {
            let jerk = if k + 1 < pts.len() {
                (pts[k + 1].accel - pts[k].accel) / traj.dt()
            } else {
                0.0
            };
            jerk.abs() <= cfg.jerk_max + 1e-9 && pts[k].accel.abs() <= cfg.acc_max + 1e-9
        })
        .count();
    let comfort = comfortable as f64 / pts.len() as f64;
    let gated = ttc.is_some_and(|t| t <= cfg.collision_check_window_s + 1e-9);
    let reference = progress_ref.unwrap_or(progress);
    let norm_progress = if reference > 1e-9 { (progress / reference).min(1.0) } else { 1.0 };
    let total = if gated {
        0.0
    } else {
        100.0 * (0.5 * norm_progress + 0.3 * compliance + 0.2 * comfort)
    };
    Ok(CandidateScore {
        at_fault_collision: ttc.is_some(),
        time_to_collision_s: ttc,
        drivable_compliance: compliance,
        progress_m: progress,
        comfort,
        total,
    })
}

/// Scores all candidates in place, normalizing progress across the set.
pub fn score_candidates(
    cands: &mut [CandidatePath],
    forecasts: &[Vec<ConvexPolygon>],
    forecast_dt: f64,
    corridor: &DrivableCorridor,
    fp: &Footprint,
    cfg: &SamplerConfig,
) -> Result<()> {
    for c in cands.iter_mut() {
        c.score = score_candidate(c, forecasts, forecast_dt, corridor, fp, None, cfg)?;
    }
    let best = cands.iter().map(|c| c.score.progress_m).fold(0.0, f64::max);
    for c in cands.iter_mut() {
        c.score = score_candidate(c, forecasts, forecast_dt, corridor, fp, Some(best), cfg)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub trajectory: Trajectory,
    pub max_brake: bool,
}

/// Highest total wins; ties go to the smaller |offset|, then the lower
/// fraction. A winner colliding inside the window is replaced by a
/// maximum-braking profile along the zero-offset path.
pub fn select_path(cands: &[CandidatePath], cfg: &SamplerConfig) -> Result<Selection> {
    let index = (0..cands.len())
        .min_by(|&a, &b| {
            let (ca, cb) = (&cands[a], &cands[b]);
            cb.score
                .total
                .total_cmp(&ca.score.total)
                .then(ca.lateral_offset.abs().total_cmp(&cb.lateral_offset.abs()))
                .then(ca.speed_fraction.total_cmp(&cb.speed_fraction))
        })
        .ok_or(SamplerError::NoCandidates)?;
    let winner = &cands[index];
    let brake = winner
        .score
        .time_to_collision_s
        .is_some_and(|t| t <= cfg.collision_check_window_s + 1e-9);
    if !brake {
        return Ok(Selection {
            index,
            trajectory: winner.trajectory.clone(),
            max_brake: false,
        });
    }
    let base = cands
        .iter()
        .filter(|c| c.lateral_offset == 0.0)
        .max_by(|a, b| a.speed_fraction.total_cmp(&b.speed_fraction))
        .unwrap_or(winner);
    let n = base.trajectory.len();
    let dt = base.trajectory.dt();
    let mut vs = Vec::with_capacity(n);
    let mut ss = Vec::with_capacity(n);
    let mut accs = Vec::with_capacity(n);
    let (mut v, mut s) = (base.trajectory.points()[0].speed, 0.0);
    for _ in 0..n {
        vs.push(v);
        ss.push(s);
        let v_next = (v - cfg.max_brake * dt).max(0.0);
        accs.push((v_next - v) / dt);
        s += if v_next > 0.0 { 0.5 * (v + v_next) * dt } else { v * v / (2.0 * cfg.max_brake) };
        v = v_next;
    }
    let trajectory = match &base.path {
        Some(path) => trajectory_along(path, &ss, &vs, &accs, dt)?,
        None => {
            let path = Polyline::new_dedup(base.trajectory.positions(), 1e-6)?;
            trajectory_along(&path, &ss, &vs, &accs, dt)?
        }
    };
    Ok(Selection {
        index,
        trajectory,
        max_brake: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idm_free_road_cases() {
        let p = IdmParams::default();
        assert_eq!(idm_acceleration(0.0, 5.0, f64::INFINITY, 0.0, &p, 6.0).unwrap(), p.a_max);
        assert!(idm_acceleration(5.0, 5.0, f64::INFINITY, 0.0, &p, 6.0).unwrap().abs() < 1e-15);
        assert!(idm_acceleration(1.0, 0.0, f64::INFINITY, 0.0, &p, 6.0).is_err());
    }

    #[test]
    fn forecast_shapes() {
        let sq = ConvexPolygon::new(vec![
            Vec2::new(-1.0, -1.0),
            Vec2::new(1.0, -1.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(-1.0, 1.0),
        ])
        .unwrap();
        let obs = vec![
            AgentObservation { id: "a".into(), polygon: sq.clone(), position: Vec2::zeros(), velocity: Vec2::new(2.0, 0.0) },
            AgentObservation { id: "b".into(), polygon: sq.clone(), position: Vec2::zeros(), velocity: Vec2::zeros() },
        ];
        let f = forecast_agents(&obs, 8.0, 0.1);
        assert!(f.iter().all(|t| t.len() == 81));
        assert!((f[0][80].centroid() - Vec2::new(16.0, 0.0)).norm() < 1e-9);
        assert!(f[1].iter().all(|p| p == &sq));
    }
}
