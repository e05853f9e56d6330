//! Adaptive cruise planning: dynamic safe following distance and a convex
//! velocity-smoothing program over the acceleration sequence.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::{solve_qp, QpError, QpProblem, QpSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CruiseError {
    #[error("singular deceleration")]
    SingularDeceleration,
    #[error("invalid cruise input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CruiseConfig {
    pub t_idling: f64,
    /// Assumed ego braking magnitude (positive).
    pub a_ego_brake: f64,
    /// Assumed braking magnitude of the obstacle (positive).
    pub a_obstacle_brake: f64,
    pub w_v: f64,
    pub w_a: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub sqp_passes: usize,
    /// Standstill floor of the safe distance.
    pub d_min: f64,
}

impl Default for CruiseConfig {
    fn default() -> Self {
        Self {
            t_idling: 1.0,
            a_ego_brake: 3.0,
            a_obstacle_brake: 3.0,
            w_v: 1.0,
            w_a: 10.0,
            v_max: 30.0 / 3.6,
            a_min: -4.0,
            a_max: 2.0,
            sqp_passes: 2,
            d_min: 2.0,
        }
    }
}

impl CruiseConfig {
    pub fn validate(&self) -> Result<(), CruiseError> {
        let bad = |m: &str| Err(CruiseError::InvalidInput(m.to_string()));
        if !(self.t_idling >= 0.0) {
            return bad("t_idling must be non-negative");
        }
        if !(self.a_min < 0.0 && self.a_max > 0.0) {
            return bad("need a_min < 0 < a_max");
        }
        if !(self.w_v >= 0.0 && self.w_a >= 0.0) {
            return bad("weights must be non-negative");
        }
        if !(self.v_max > 0.0) {
            return bad("v_max must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadState {
    /// Bumper-to-bumper distance along the path.
    pub gap: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CruiseProfile {
    pub speeds: Vec<f64>,
    pub accels: Vec<f64>,
    pub dt: f64,
    /// True when the profile is the maximum-deceleration fallback.
    pub emergency: bool,
}

impl CruiseProfile {
    /// Distance travelled at each step, trapezoidal.
    pub fn positions(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.speeds.len());
        let mut acc = 0.0;
        p.push(0.0);
        for w in self.speeds.windows(2) {
            acc += 0.5 * (w[0] + w[1]) * self.dt;
            p.push(acc);
        }
        p
    }
}

fn raw_safe_distance(v_ego: f64, v_obstacle: f64, cfg: &CruiseConfig) -> f64 {
    let t = cfg.t_idling;
    v_ego * t + 0.5 * cfg.a_ego_brake * t * t + v_ego * v_ego / (2.0 * cfg.a_ego_brake)
        - v_obstacle * v_obstacle / (2.0 * cfg.a_obstacle_brake)
}

/// Safe following distance with both accelerations read as positive braking
/// magnitudes, floored at `cfg.d_min`.
pub fn safe_distance(v_ego: f64, v_obstacle: f64, cfg: &CruiseConfig) -> Result<f64, CruiseError> {
    if !(cfg.a_ego_brake > 0.0 && cfg.a_obstacle_brake > 0.0) {
        return Err(CruiseError::SingularDeceleration);
    }
    if !(v_ego >= 0.0 && v_obstacle >= 0.0) {
        return Err(CruiseError::InvalidInput("speeds must be non-negative".into()));
    }
    Ok(raw_safe_distance(v_ego, v_obstacle, cfg).max(cfg.d_min))
}

/// Constant maximum deceleration until standstill.
pub fn emergency_profile(v0: f64, n: usize, dt: f64, a_min: f64) -> CruiseProfile {
    let mut speeds = Vec::with_capacity(n);
    let mut v = v0.max(0.0);
    for _ in 0..n {
        speeds.push(v);
        v = (v + a_min * dt).max(0.0);
    }
    finish(speeds, v, dt, true)
}

fn finish(speeds: Vec<f64>, v_next: f64, dt: f64, emergency: bool) -> CruiseProfile {
    let n = speeds.len();
    let accels = (0..n)
        .map(|k| {
            let next = if k + 1 < n { speeds[k + 1] } else { v_next };
            (next - speeds[k]) / dt
        })
        .collect();
    CruiseProfile {
        speeds,
        accels,
        dt,
        emergency,
    }
}

struct Kinematics {
    // v_k = v0 + (vel * a)_k for k = 1..=n
    vel: DMatrix<f64>,
    // p_k = k dt v0 + (pos * a)_k for k = 1..=n
    pos: DMatrix<f64>,
}

impl Kinematics {
    fn new(n: usize, dt: f64) -> Self {
        let vel = DMatrix::from_fn(n, n, |k, j| if j <= k { dt } else { 0.0 });
        let mut pos = DMatrix::zeros(n, n);
        // p_{k+1} = p_k + dt (v_k + v_{k+1}) / 2
        for k in 0..n {
            for j in 0..n {
                let prev_p = if k > 0 { pos[(k - 1, j)] } else { 0.0 };
                let prev_v = if k > 0 { vel[(k - 1, j)] } else { 0.0 };
                pos[(k, j)] = prev_p + 0.5 * dt * (prev_v + vel[(k, j)]);
            }
        }
        Self { vel, pos }
    }
}

/// Plans `horizon_points` speeds starting at `v0` that track `v_desired`
/// while keeping the dynamic safe distance to a constant-speed lead.
pub fn plan_cruise_profile(
    v0: f64,
    lead: Option<&LeadState>,
    v_desired: f64,
    horizon_points: usize,
    dt: f64,
    cfg: &CruiseConfig,
    settings: &QpSettings,
) -> Result<CruiseProfile, CruiseError> {
    cfg.validate()?;
    if !(v0 >= 0.0) || !(dt > 0.0) || horizon_points < 2 {
        return Err(CruiseError::InvalidInput(format!(
            "v0 {v0}, dt {dt}, horizon {horizon_points}"
        )));
    }
    if !(v_desired >= 0.0 && v_desired <= cfg.v_max + 1e-9) {
        return Err(CruiseError::InvalidInput(format!(
            "desired speed {v_desired} outside [0, {}]",
            cfg.v_max
        )));
    }
    if let Some(l) = lead {
        if !(l.gap >= 0.0) {
            return Err(CruiseError::InvalidInput("negative lead gap".into()));
        }
        // small tolerance absorbs solver round-off when riding the constraint
        if l.gap < safe_distance(v0, l.speed, cfg)? - 1e-4 {
            return Ok(emergency_profile(v0, horizon_points, dt, cfg.a_min));
        }
    }
    // decision variables a_0 .. a_{n-1} drive v_1 .. v_n
    let n = horizon_points;
    let kin = Kinematics::new(n, dt);
    let c = DVector::from_element(n, v_desired - v0);
    let hessian = (kin.vel.tr_mul(&kin.vel) * cfg.w_v + DMatrix::identity(n, n) * cfg.w_a) * 2.0;
    let linear = kin.vel.tr_mul(&c) * (-2.0 * cfg.w_v);
    let mut problem = QpProblem::unconstrained(hessian, linear);
    problem.constant = cfg.w_v * c.norm_squared();

    let rows_box = 2 * n;
    let rows_gap = if lead.is_some() { n } else { 0 };
    let mut a_in = DMatrix::zeros(rows_box + rows_gap, n);
    let mut lb = DVector::zeros(rows_box + rows_gap);
    let mut ub = DVector::zeros(rows_box + rows_gap);
    for k in 0..n {
        a_in[(k, k)] = 1.0;
        lb[k] = cfg.a_min;
        ub[k] = cfg.a_max;
        a_in.row_mut(n + k).copy_from(&kin.vel.row(k));
        // an over-speed start can only shed speed at a_min
        let v_cap = cfg.v_max.max(v0 + cfg.a_min * dt * (k + 1) as f64);
        lb[n + k] = -v0;
        ub[n + k] = v_cap - v0;
    }
    problem.a_in = a_in;
    problem.lb = lb;
    problem.ub = ub;

    let speeds_of = |a: &DVector<f64>| -> Vec<f64> {
        let v = &kin.vel * a;
        std::iter::once(v0).chain(v.iter().map(|x| v0 + x)).collect()
    };

    let Some(lead) = lead else {
        let sol = solve_qp(&problem, settings)?;
        let v = speeds_of(&sol.x);
        return Ok(finish(v[..n].to_vec(), v[n].max(0.0), dt, false).clamped());
    };

    // gap_k = gap0 + v_l t_k - p_k >= d(v̂_k) + d'(v̂_k)(v_k - v̂_k), k = 1..n
    let mut v_hat = vec![v0; n + 1];
    let max_passes = cfg.sqp_passes.max(1) + 8;
    let mut last = None;
    for pass in 0..max_passes {
        for k in 0..n {
            let t = (k + 1) as f64 * dt;
            let vh = v_hat[k + 1].max(0.0);
            let raw = raw_safe_distance(vh, lead.speed, cfg);
            let slope = if raw > cfg.d_min { cfg.t_idling + vh / cfg.a_ego_brake } else { 0.0 };
            let d0 = raw.max(cfg.d_min) - slope * vh;
            // gap0 + vl t - (t v0 + pos a) - slope (v0 + vel a) >= d0
            let row = kin.pos.row(k) + kin.vel.row(k) * slope;
            let r = rows_box + k;
            problem.a_in.row_mut(r).copy_from(&(-row));
            problem.lb[r] = d0 - lead.gap - lead.speed * t + t * v0 + slope * v0;
            problem.ub[r] = f64::INFINITY;
        }
        let sol = match solve_qp(&problem, settings) {
            Ok(s) => s,
            Err(QpError::Infeasible) => {
                return Ok(emergency_profile(v0, horizon_points, dt, cfg.a_min));
            }
            Err(e) => return Err(e.into()),
        };
        let v = speeds_of(&sol.x);
        let pos = &kin.pos * &sol.x;
        let worst = (0..n)
            .map(|k| {
                let t = (k + 1) as f64 * dt;
                let gap = lead.gap + lead.speed * t - (t * v0 + pos[k]);
                raw_safe_distance(v[k + 1].max(0.0), lead.speed, cfg).max(cfg.d_min) - gap
            })
            .fold(f64::NEG_INFINITY, f64::max);
        v_hat = v.clone();
        last = Some(v);
        if pass + 1 >= cfg.sqp_passes && worst <= 1e-7 {
            break;
        }
    }
    let v = last.unwrap();
    Ok(finish(v[..n].to_vec(), v[n].max(0.0), dt, false).clamped())
}

impl CruiseProfile {
    // removes round-off below zero without breaking accel = dv/dt
    fn clamped(mut self) -> Self {
        let n = self.speeds.len();
        let mut next = self.speeds[n - 1] + self.accels[n - 1] * self.dt;
        for v in &mut self.speeds {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if next < 0.0 {
            next = 0.0;
        }
        finish(self.speeds, next, self.dt, self.emergency)
    }

    /// Cruise objective evaluated on this profile.
    pub fn objective(&self, v_desired: f64, cfg: &CruiseConfig) -> f64 {
        let n = self.speeds.len();
        let mut j = 0.0;
        for k in 0..n {
            let v_next = self.speeds[k] + self.accels[k] * self.dt;
            j += cfg.w_v * (v_desired - v_next).powi(2) + cfg.w_a * self.accels[k].powi(2);
        }
        j
    }
}
