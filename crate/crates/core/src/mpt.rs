//! Model predictive trajectory refinement: a condensed QP over the steering
//! sequence of a kinematic bicycle linearized about a reference path.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cruise::CruiseProfile;
use crate::geometry::{
    footprint_collides, heading_vec, normalize_angle, project_to_path, resample_polyline,
    ConvexPolygon, EgoState, Footprint, GeometryError, Polyline, Pose2D, Trajectory,
    TrajectoryPoint, Vec2,
};
use crate::lane::DrivableCorridor;
use crate::qp::{solve_qp, QpDump, QpError, QpProblem, QpSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MptError {
    #[error("invalid mpt config: {0}")]
    Config(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

pub type Result<T, E = MptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MptWeights {
    pub w_y: f64,
    pub w_theta: f64,
    pub w_delta: f64,
    pub w_delta_rate: f64,
    pub w_delta_accel: f64,
}

impl Default for MptWeights {
    fn default() -> Self {
        Self {
            w_y: 1.0,
            w_theta: 0.5,
            w_delta: 0.01,
            w_delta_rate: 1.0,
            w_delta_accel: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MptConfig {
    pub weights: MptWeights,
    pub n_fix: usize,
    pub horizon_points: usize,
    pub dt: f64,
    pub wheelbase: f64,
    pub delta_max: f64,
    pub slack_penalty: f64,
    pub kkt_tol: f64,
    pub max_iterations: usize,
    /// Extra clearance kept from the corridor limits inside the QP.
    pub corridor_margin: f64,
    /// Clearance used when carving static obstacles out of the corridor.
    pub obstacle_clearance: f64,
    pub min_ref_speed: f64,
    /// Keep a copy of the assembled QP in the result.
    pub record_qp: bool,
}

impl Default for MptConfig {
    fn default() -> Self {
        Self {
            weights: MptWeights::default(),
            n_fix: 5,
            horizon_points: 80,
            dt: 0.1,
            wheelbase: 2.7,
            delta_max: 0.6,
            slack_penalty: 1e4,
            kkt_tol: 1e-6,
            max_iterations: 5000,
            corridor_margin: 0.15,
            obstacle_clearance: 0.2,
            min_ref_speed: 0.1,
            record_qp: false,
        }
    }
}

impl MptConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let ws = [w.w_y, w.w_theta, w.w_delta, w.w_delta_rate, w.w_delta_accel];
        if ws.iter().any(|x| !(*x >= 0.0)) || ws.iter().all(|x| *x == 0.0) {
            return Err(MptError::Config("weights must be >= 0 with one positive".into()));
        }
        if self.horizon_points < 3 || self.n_fix >= self.horizon_points {
            return Err(MptError::Config(format!(
                "need 0 <= n_fix ({}) < horizon_points ({})",
                self.n_fix, self.horizon_points
            )));
        }
        if !(self.dt > 0.0) || !(self.wheelbase > 0.0) {
            return Err(MptError::Config("dt and wheelbase must be positive".into()));
        }
        if !(self.delta_max > 0.0 && self.delta_max < std::f64::consts::FRAC_PI_2) {
            return Err(MptError::Config("delta_max must lie in (0, pi/2)".into()));
        }
        if !(self.slack_penalty > 0.0) {
            return Err(MptError::Config("slack_penalty must be positive".into()));
        }
        Ok(())
    }

    fn qp_settings(&self) -> QpSettings {
        QpSettings {
            kkt_tol: self.kkt_tol,
            max_iterations: self.max_iterations,
        }
    }

    pub fn max_curvature(&self) -> f64 {
        self.delta_max.tan() / self.wheelbase
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorState {
    pub y: f64,
    pub theta: f64,
}

/// One step of the error dynamics: `e_{k+1} = a e_k + b δ_k + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorTransition {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub c: Vector2<f64>,
}

impl ErrorTransition {
    pub fn apply(&self, e: &ErrorState, delta: f64) -> ErrorState {
        let v = self.a * Vector2::new(e.y, e.theta) + self.b * delta + self.c;
        ErrorState { y: v.x, theta: v.y }
    }
}

/// Path-frame kinematic bicycle linearized about a reference with the given
/// per-step speeds and curvatures. Speeds below `min_speed` are floored.
pub fn linearize_error_dynamics(
    speeds: &[f64],
    curvatures: &[f64],
    dt: f64,
    wheelbase: f64,
    min_speed: f64,
) -> Result<Vec<ErrorTransition>> {
    if speeds.len() != curvatures.len() {
        return Err(MptError::LengthMismatch(format!(
            "{} speeds vs {} curvatures",
            speeds.len(),
            curvatures.len()
        )));
    }
    Ok(speeds
        .iter()
        .zip(curvatures)
        .map(|(&v, &kappa)| {
            let v = if v < min_speed {
                log::warn!("reference speed {v} floored at {min_speed}");
                min_speed
            } else {
                v
            };
            ErrorTransition {
                a: Matrix2::new(1.0, v * dt, 0.0, 1.0),
                b: Vector2::new(0.0, v * dt / wheelbase),
                c: Vector2::new(0.0, -v * dt * kappa),
            }
        })
        .collect())
}

/// Reference state sampled along the path at the planned stations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefPoint {
    pub s: f64,
    pub pos: Vec2,
    pub heading: f64,
    pub curvature: f64,
    pub speed: f64,
}

/// Samples `path` at the stations an ego starting at `ego` reaches with the
/// given speeds (floored). Past the end the path continues straight.
pub fn build_reference(
    path: &Polyline,
    ego: &Pose2D,
    speeds: &[f64],
    cfg: &MptConfig,
) -> Result<Vec<RefPoint>> {
    let fine = if path.length() > 1.0 { resample_polyline(path, 0.5)? } else { path.clone() };
    let mut s = project_to_path(&fine, &ego.position(), ego.heading)?.s;
    let mut out: Vec<RefPoint> = Vec::with_capacity(speeds.len());
    for &v in speeds {
        let v = v.max(cfg.min_ref_speed);
        out.push(RefPoint {
            s,
            pos: fine.point_at_extended(s),
            heading: fine.smooth_heading_at(s),
            curvature: 0.0,
            speed: v,
        });
        s += v * cfg.dt;
    }
    // curvature as the heading change to the next point, so that the
    // linearized heading integrates back to the sampled headings
    let last = fine.smooth_heading_at(s);
    for k in 0..out.len() {
        let next = out.get(k + 1).map_or(last, |r| r.heading);
        out[k].curvature = normalize_angle(next - out[k].heading) / (out[k].speed * cfg.dt);
    }
    Ok(out)
}

/// Error states as affine functions of the steering vector.
#[derive(Debug, Clone)]
pub struct Condensed {
    pub y_const: DVector<f64>,
    pub y_lin: DMatrix<f64>,
    pub theta_const: DVector<f64>,
    pub theta_lin: DMatrix<f64>,
}

impl Condensed {
    pub fn new(e0: ErrorState, steps: &[ErrorTransition]) -> Self {
        let n = steps.len();
        let mut y_const = DVector::zeros(n);
        let mut theta_const = DVector::zeros(n);
        let mut y_lin = DMatrix::zeros(n, n);
        let mut theta_lin = DMatrix::zeros(n, n);
        y_const[0] = e0.y;
        theta_const[0] = e0.theta;
        for k in 0..n - 1 {
            let t = &steps[k];
            y_const[k + 1] = t.a[(0, 0)] * y_const[k] + t.a[(0, 1)] * theta_const[k] + t.c.x;
            theta_const[k + 1] = t.a[(1, 0)] * y_const[k] + t.a[(1, 1)] * theta_const[k] + t.c.y;
            for j in 0..=k {
                let (yj, tj) = (y_lin[(k, j)], theta_lin[(k, j)]);
                let (by, bt) = if j == k { (t.b.x, t.b.y) } else { (0.0, 0.0) };
                y_lin[(k + 1, j)] = t.a[(0, 0)] * yj + t.a[(0, 1)] * tj + by;
                theta_lin[(k + 1, j)] = t.a[(1, 0)] * yj + t.a[(1, 1)] * tj + bt;
            }
        }
        Self {
            y_const,
            y_lin,
            theta_const,
            theta_lin,
        }
    }

    pub fn errors(&self, delta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            &self.y_const + &self.y_lin * delta,
            &self.theta_const + &self.theta_lin * delta,
        )
    }
}

/// Tracking cost evaluated term by term, without going through the QP matrices.
pub fn direct_objective(
    cond: &Condensed,
    delta: &[f64],
    slack: &[f64],
    cfg: &MptConfig,
) -> f64 {
    let w = &cfg.weights;
    let d = DVector::from_column_slice(delta);
    let (y, th) = cond.errors(&d);
    let dt = cfg.dt;
    let mut j = w.w_y * y.norm_squared() + w.w_theta * th.norm_squared();
    j += w.w_delta * d.norm_squared();
    for k in 0..delta.len() - 1 {
        j += w.w_delta_rate * ((delta[k + 1] - delta[k]) / dt).powi(2);
    }
    for k in 0..delta.len().saturating_sub(2) {
        j += w.w_delta_accel * ((delta[k + 2] - 2.0 * delta[k + 1] + delta[k]) / (dt * dt)).powi(2);
    }
    j + cfg.slack_penalty * slack.iter().map(|s| s * s).sum::<f64>()
}

/// Previously executed plan with the absolute time of its first point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviousPlan {
    pub trajectory: Trajectory,
    pub start_time: f64,
    /// Seeded from a reference rather than produced by the optimizer; only
    /// the first steering value is pinned.
    #[serde(default)]
    pub cold_start: bool,
}

impl PreviousPlan {
    pub fn steering(&self, wheelbase: f64) -> Vec<f64> {
        self.trajectory
            .points()
            .iter()
            .map(|p| (p.curvature * wheelbase).atan())
            .collect()
    }
}

/// Steering values the QP must reproduce, aligned with the current time.
/// On a cold start, or when the previous plan cannot cover `n_fix` steps,
/// only the first is pinned.
pub fn steering_pins(prev: &PreviousPlan, now: f64, cfg: &MptConfig) -> Vec<f64> {
    let steer = prev.steering(cfg.wheelbase);
    let shift = ((now - prev.start_time) / cfg.dt).round().max(0.0) as usize;
    let clamp = |d: f64| d.clamp(-cfg.delta_max, cfg.delta_max);
    if prev.cold_start || shift + cfg.n_fix >= steer.len() {
        return vec![clamp(steer[shift.min(steer.len() - 1)])];
    }
    steer[shift..=shift + cfg.n_fix].iter().map(|&d| clamp(d)).collect()
}

/// Corridor-frame offsets of the checked body points, relative to the rear axle.
fn body_points(fp: &Footprint) -> [f64; 3] {
    [-fp.rear_axle_to_rear, 0.0, fp.front_overhang()]
}

/// The assembled program plus what is needed to interpret its solution.
#[derive(Debug, Clone)]
pub struct AssembledQp {
    pub problem: QpProblem,
    pub condensed: Condensed,
    pub reference: Vec<RefPoint>,
}

impl AssembledQp {
    pub fn n_delta(&self) -> usize {
        self.reference.len()
    }
}

pub fn assemble_qp(
    reference: Vec<RefPoint>,
    corridor: &DrivableCorridor,
    ego: &EgoState,
    fp: &Footprint,
    pins: &[f64],
    cfg: &MptConfig,
) -> Result<AssembledQp> {
    cfg.validate()?;
    let n = cfg.horizon_points;
    if reference.len() != n {
        return Err(MptError::LengthMismatch(format!(
            "reference has {} points, horizon is {n}",
            reference.len()
        )));
    }
    if corridor.stations.len() != corridor.left_limit.len()
        || corridor.stations.len() != corridor.right_limit.len()
    {
        return Err(MptError::LengthMismatch("corridor limits".into()));
    }
    let speeds: Vec<f64> = reference.iter().map(|r| r.speed).collect();
    let kappa: Vec<f64> = reference.iter().map(|r| r.curvature).collect();
    let steps = linearize_error_dynamics(&speeds, &kappa, cfg.dt, cfg.wheelbase, cfg.min_ref_speed)?;
    let r0 = &reference[0];
    let rel = ego.pose.position() - r0.pos;
    let e0 = ErrorState {
        y: -r0.heading.sin() * rel.x + r0.heading.cos() * rel.y,
        theta: normalize_angle(ego.pose.heading - r0.heading),
    };
    let cond = Condensed::new(e0, &steps);

    let ns = n - 1;
    let nx = n + ns;
    let w = &cfg.weights;
    let dt = cfg.dt;
    let mut d1 = DMatrix::zeros(n - 1, n);
    for k in 0..n - 1 {
        d1[(k, k)] = -1.0 / dt;
        d1[(k, k + 1)] = 1.0 / dt;
    }
    let mut d2 = DMatrix::zeros(n - 2, n);
    for k in 0..n - 2 {
        d2[(k, k)] = 1.0 / (dt * dt);
        d2[(k, k + 1)] = -2.0 / (dt * dt);
        d2[(k, k + 2)] = 1.0 / (dt * dt);
    }
    let hd = cond.y_lin.tr_mul(&cond.y_lin) * w.w_y
        + cond.theta_lin.tr_mul(&cond.theta_lin) * w.w_theta
        + DMatrix::identity(n, n) * w.w_delta
        + d1.tr_mul(&d1) * w.w_delta_rate
        + d2.tr_mul(&d2) * w.w_delta_accel;
    let mut hessian = DMatrix::zeros(nx, nx);
    hessian.view_mut((0, 0), (n, n)).copy_from(&(hd * 2.0));
    for i in n..nx {
        hessian[(i, i)] = 2.0 * cfg.slack_penalty;
    }
    // symmetrize away round-off from the products
    let hessian = (&hessian + hessian.transpose()) * 0.5;
    let mut linear = DVector::zeros(nx);
    let fd = (cond.y_lin.tr_mul(&cond.y_const) * w.w_y
        + cond.theta_lin.tr_mul(&cond.theta_const) * w.w_theta)
        * 2.0;
    linear.rows_mut(0, n).copy_from(&fd);
    let constant = w.w_y * cond.y_const.norm_squared() + w.w_theta * cond.theta_const.norm_squared();

    let mut a_eq = DMatrix::zeros(pins.len(), nx);
    let mut b_eq = DVector::zeros(pins.len());
    for (k, &v) in pins.iter().enumerate() {
        a_eq[(k, k)] = 1.0;
        b_eq[k] = v;
    }

    let mut in_rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    for k in 0..n {
        let mut r = DVector::zeros(nx);
        r[k] = 1.0;
        in_rows.push((r, -cfg.delta_max, cfg.delta_max));
    }
    for j in 0..ns {
        let mut r = DVector::zeros(nx);
        r[n + j] = 1.0;
        in_rows.push((r, 0.0, f64::INFINITY));
    }
    let len_c = corridor.reference.length();
    for k in 1..n {
        let rp = &reference[k];
        let fr = project_to_path(&corridor.reference, &rp.pos, rp.heading)?;
        if fr.s <= 0.0 || fr.s >= len_c {
            continue;
        }
        for l in body_points(fp) {
            // each body point is projected on its own so that the corridor's
            // bend between axle and bumper is accounted for
            let pt = rp.pos + heading_vec(rp.heading) * l;
            let fl = project_to_path(&corridor.reference, &pt, rp.heading)?;
            let c = fl.heading_err.cos();
            let (left, right) = corridor.limits_at(fl.s);
            let konst = fl.d + c * (cond.y_const[k] + l * cond.theta_const[k]);
            let mut r = DVector::zeros(nx);
            for j in 0..n {
                r[j] = c * (cond.y_lin[(k, j)] + l * cond.theta_lin[(k, j)]);
            }
            // lateral - slack <= left - margin
            let mut up = r.clone();
            up[n + k - 1] = -1.0;
            in_rows.push((up, f64::NEG_INFINITY, left - cfg.corridor_margin - konst));
            // lateral + slack >= right + margin
            let mut lo = r;
            lo[n + k - 1] = 1.0;
            in_rows.push((lo, right + cfg.corridor_margin - konst, f64::INFINITY));
        }
    }
    let m = in_rows.len();
    let mut a_in = DMatrix::zeros(m, nx);
    let mut lb = DVector::zeros(m);
    let mut ub = DVector::zeros(m);
    for (i, (r, l, u)) in in_rows.into_iter().enumerate() {
        a_in.row_mut(i).copy_from(&r.transpose());
        lb[i] = l;
        ub[i] = u;
    }
    let problem = QpProblem {
        hessian,
        linear,
        constant,
        a_eq,
        b_eq,
        a_in,
        lb,
        ub,
    };
    Ok(AssembledQp {
        problem,
        condensed: cond,
        reference,
    })
}

/// Integrates the kinematic bicycle over each step at constant curvature,
/// travelling the trapezoidal distance of the speed profile.
pub fn rollout(start: &Pose2D, steering: &[f64], speeds: &CruiseProfile, cfg: &MptConfig) -> Result<Trajectory> {
    let n = steering.len();
    if speeds.speeds.len() != n {
        return Err(MptError::LengthMismatch(format!(
            "{} steering values vs {} speeds",
            n,
            speeds.speeds.len()
        )));
    }
    let mut pose = *start;
    let mut pts = Vec::with_capacity(n);
    for k in 0..n {
        let kappa = steering[k].tan() / cfg.wheelbase;
        pts.push(TrajectoryPoint {
            pose,
            t: k as f64 * cfg.dt,
            speed: speeds.speeds[k],
            accel: speeds.accels[k],
            curvature: kappa,
        });
        let v_next = (speeds.speeds[k] + speeds.accels[k] * speeds.dt).max(0.0);
        let ds = 0.5 * (speeds.speeds[k] + v_next) * cfg.dt;
        pose = arc_step(&pose, kappa, ds);
    }
    Ok(Trajectory::new(pts, cfg.dt)?)
}

fn arc_step(p: &Pose2D, kappa: f64, ds: f64) -> Pose2D {
    let dh = kappa * ds;
    // chord of the arc, exact for any curvature
    let chord = if dh.abs() < 1e-9 { ds } else { 2.0 * (dh / 2.0).sin() / kappa };
    let d = heading_vec(p.heading + dh / 2.0) * chord;
    Pose2D::new(p.x + d.x, p.y + d.y, p.heading + dh)
}

/// Everything an optimization cycle needs.
#[derive(Debug, Clone, Copy)]
pub struct MptInput<'a> {
    /// Reference geometry, usually the neural network trajectory's path.
    pub reference: &'a Polyline,
    pub corridor: &'a DrivableCorridor,
    pub static_obstacles: &'a [ConvexPolygon],
    /// Forecast polygons of moving agents, one per trajectory step.
    pub agent_tracks: &'a [Vec<ConvexPolygon>],
    pub ego: &'a EgoState,
    pub footprint: &'a Footprint,
    pub prev: &'a PreviousPlan,
    pub speeds: &'a CruiseProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MptResult {
    pub trajectory: Trajectory,
    /// Absolute time of the trajectory's first point.
    pub start_time: f64,
    pub used_fallback: bool,
    pub objective_value: f64,
    pub kkt_residual: f64,
    pub steering: Vec<f64>,
    pub pinned: Vec<f64>,
    pub failure: Option<String>,
    /// Rollout that failed the post-check, kept for inspection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<Trajectory>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qp: Option<QpDump>,
}

/// Why the post-check rejected a rollout, if it did.
pub fn check_rollout(
    traj: &Trajectory,
    corridor: &DrivableCorridor,
    static_obstacles: &[ConvexPolygon],
    agent_tracks: &[Vec<ConvexPolygon>],
    fp: &Footprint,
) -> Option<String> {
    let len = corridor.reference.length();
    for (k, p) in traj.points().iter().enumerate().skip(1) {
        if footprint_collides(&p.pose, fp, static_obstacles) {
            return Some(format!("collision with static obstacle at step {k}"));
        }
        for track in agent_tracks {
            if let Some(poly) = track.get(k) {
                if footprint_collides(&p.pose, fp, std::slice::from_ref(poly)) {
                    return Some(format!("collision with agent at step {k}"));
                }
            }
        }
        let fr = project_to_path(&corridor.reference, &p.pose.position(), p.pose.heading);
        let within = fr.map(|f| f.s < len).unwrap_or(false);
        if within && !corridor.footprint_inside(&p.pose, fp) {
            return Some(format!("corridor violation at step {k}"));
        }
    }
    None
}

fn fallback(
    input: &MptInput,
    pins: Vec<f64>,
    reason: String,
    rejected: Option<Trajectory>,
    qp: Option<QpDump>,
) -> MptResult {
    log::debug!("mpt fallback: {reason}");
    MptResult {
        trajectory: input.prev.trajectory.clone(),
        start_time: input.prev.start_time,
        used_fallback: true,
        objective_value: f64::NAN,
        kkt_residual: f64::NAN,
        steering: Vec::new(),
        pinned: pins,
        failure: Some(reason),
        rejected,
        qp,
    }
}

pub fn optimize_trajectory(input: &MptInput, cfg: &MptConfig) -> Result<MptResult> {
    cfg.validate()?;
    let n = cfg.horizon_points;
    if input.speeds.speeds.len() != n {
        return Err(MptError::LengthMismatch(format!(
            "speed profile has {} points, horizon is {n}",
            input.speeds.speeds.len()
        )));
    }
    let pins = steering_pins(input.prev, input.ego.timestamp, cfg);
    let corridor = input
        .corridor
        .carve(input.static_obstacles, input.footprint, cfg.obstacle_clearance);
    let reference = build_reference(input.reference, &input.ego.pose, &input.speeds.speeds, cfg)?;
    let asm = assemble_qp(reference, &corridor, input.ego, input.footprint, &pins, cfg)?;
    let dump = cfg.record_qp.then(|| asm.problem.dump());
    let sol = match solve_qp(&asm.problem, &cfg.qp_settings()) {
        Ok(s) => s,
        Err(e) => return Ok(fallback(input, pins, e.to_string(), None, dump)),
    };
    let steering: Vec<f64> = sol.x.rows(0, n).iter().copied().collect();
    let traj = rollout(&input.ego.pose, &steering, input.speeds, cfg)?;
    if let Some(reason) = check_rollout(
        &traj,
        &corridor,
        input.static_obstacles,
        input.agent_tracks,
        input.footprint,
    ) {
        return Ok(fallback(input, pins, reason, Some(traj), dump));
    }
    Ok(MptResult {
        trajectory: traj,
        start_time: input.ego.timestamp,
        used_fallback: false,
        objective_value: sol.objective,
        kkt_residual: sol.kkt_residual,
        steering,
        pinned: pins,
        failure: None,
        rejected: None,
        qp: dump,
    })
}
