//! Closed-loop runs: a 100 Hz plant and controller around a 10 Hz planner,
//! recorded as a JSONL trace.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::control::track_trajectory;
use super::plant::{step_plant, PlantState};
use super::scenario::Scenario;
use super::stack::{CycleOutput, Mode, Planner, StackConfig, World};
use super::{Result, SimError};
use crate::geometry::{EgoState, Pose2D, Trajectory, Vec2};
use crate::neural::mlp::forward_calls;
use crate::neural::MlpModel;
use crate::qp::solve_calls;

pub const PLANNER_DT: f64 = 0.1;
pub const PLANT_SUBSTEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub fraction: f64,
    pub offset: f64,
    pub score: f64,
    pub ttc: Option<f64>,
    pub compliance: f64,
    pub progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadRecord {
    pub id: Option<String>,
    pub gap: f64,
    pub speed: f64,
    pub safe_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: String,
    pub pose: Pose2D,
    pub speed: f64,
}

/// One planning tick. Trajectories are stored as point arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub plant: PlantState,
    pub candidates: Vec<CandidateRecord>,
    pub selected: usize,
    pub max_brake: bool,
    pub lead: Option<LeadRecord>,
    pub nn_trajectory: Option<Vec<Vec2>>,
    pub mpt_trajectory: Option<Vec<Vec2>>,
    pub used_fallback: Option<bool>,
    pub kkt_residual: Option<f64>,
    /// Largest deviation from the pinned steering values.
    pub pin_error: Option<f64>,
    pub mpt_failure: Option<String>,
    /// Solver and network invocations during this cycle.
    pub qp_calls: u64,
    pub mlp_calls: u64,
    pub agents: Vec<AgentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub t: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimTrace {
    pub ticks: Vec<TickRecord>,
    pub failure: Option<FailureRecord>,
}

impl SimTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.ticks {
            out.push_str(&serde_json::to_string(t).expect("tick serializes"));
            out.push('\n');
        }
        if let Some(f) = &self.failure {
            out.push_str(&serde_json::json!({ "failure": f }).to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut trace = SimTrace::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |e: serde_json::Error| SimError::Format(format!("line {}: {e}", i + 1));
            let v: serde_json::Value = serde_json::from_str(line).map_err(bad)?;
            if trace.failure.is_some() {
                return Err(SimError::Format(format!("line {}: record after failure", i + 1)));
            }
            match v.get("failure") {
                Some(f) => trace.failure = Some(serde_json::from_value(f.clone()).map_err(bad)?),
                None => trace.ticks.push(serde_json::from_value(v).map_err(bad)?),
            }
        }
        Ok(trace)
    }
}

pub fn write_trace(path: &Path, trace: &SimTrace) -> Result<()> {
    let io = |e: std::io::Error| SimError::Io(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    w.write_all(trace.to_jsonl().as_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_trace(path: &Path) -> Result<SimTrace> {
    let io = |e: std::io::Error| SimError::Io(format!("{}: {e}", path.display()));
    let mut text = String::new();
    for line in BufReader::new(std::fs::File::open(path).map_err(io)?).lines() {
        text.push_str(&line.map_err(io)?);
        text.push('\n');
    }
    SimTrace::from_jsonl(&text)
}

fn yaw_rate(p: &PlantState) -> f64 {
    p.speed * p.steering.tan() / p.wheelbase
}

/// Ego state seen by the planner. Accelerations are differences over the
/// last plant step.
fn ego_state(p: &PlantState, before: &PlantState, dt: f64, t: f64) -> EgoState {
    let r = yaw_rate(p);
    EgoState {
        pose: p.pose,
        vel_lon: p.speed,
        vel_lat: 0.0,
        vel_ang: r,
        acc_lon: (p.speed - before.speed) / dt,
        acc_lat: p.speed * r,
        acc_ang: (r - yaw_rate(before)) / dt,
        timestamp: t,
    }
}

fn points(traj: &Trajectory) -> Vec<Vec2> {
    traj.positions()
}

fn record(t: f64, plant: &PlantState, out: &CycleOutput, world: &World, qp: u64, mlp: u64) -> TickRecord {
    let mpt = out.mpt.as_ref();
    TickRecord {
        t,
        plant: *plant,
        candidates: out
            .candidates
            .iter()
            .map(|c| CandidateRecord {
                fraction: c.speed_fraction,
                offset: c.lateral_offset,
                score: c.score.total,
                ttc: c.score.time_to_collision_s,
                compliance: c.score.drivable_compliance,
                progress: c.score.progress_m,
            })
            .collect(),
        selected: out.selection.index,
        max_brake: out.selection.max_brake,
        lead: out.lead.as_ref().map(|l| LeadRecord {
            id: l.id.clone(),
            gap: l.gap,
            speed: l.speed,
            safe_distance: out.lead_safe_distance.unwrap_or(f64::NAN),
        }),
        nn_trajectory: out.nn_trajectory.as_ref().map(points),
        mpt_trajectory: mpt.map(|m| points(&m.trajectory)),
        used_fallback: mpt.map(|m| m.used_fallback),
        kkt_residual: mpt.filter(|m| !m.used_fallback).map(|m| m.kkt_residual),
        pin_error: mpt.filter(|m| !m.used_fallback).map(|m| {
            m.pinned
                .iter()
                .zip(&m.steering)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        }),
        mpt_failure: mpt.and_then(|m| m.failure.clone()),
        qp_calls: qp,
        mlp_calls: mlp,
        agents: world
            .agents
            .iter()
            .map(|a| AgentRecord { id: a.id.clone(), pose: a.pose_at(t), speed: a.velocity_at(t).norm() })
            .collect(),
    }
}

/// Runs a scenario, handing every cycle's full output to `on_cycle`; the
/// run stops early when it returns false. Setup errors are returned; errors
/// during the run truncate the trace with a failure record.
pub fn run_with<F>(
    scn: &Scenario,
    world: &World,
    cfg: &StackConfig,
    mode: Mode,
    model: Option<&MlpModel>,
    mut on_cycle: F,
) -> Result<SimTrace>
where
    F: FnMut(f64, &PlantState, &CycleOutput) -> bool,
{
    let mut planner = Planner::new(world, cfg, mode, model)?;
    let mut plant = PlantState {
        pose: scn.ego_start.pose,
        speed: scn.ego_start.vel_lon.max(0.0),
        steering: 0.0,
        wheelbase: scn.footprint.wheelbase,
    };
    let sub_dt = PLANNER_DT / PLANT_SUBSTEPS as f64;
    let mut before = plant;
    let cycles = (scn.duration_s / PLANNER_DT).round() as usize;
    let mut trace = SimTrace::default();
    for k in 0..=cycles {
        let t = k as f64 * PLANNER_DT;
        let ego = if k == 0 {
            EgoState { timestamp: t, ..scn.ego_start }
        } else {
            ego_state(&plant, &before, sub_dt, t)
        };
        let (qp0, mlp0) = (solve_calls(), forward_calls());
        let out = match planner.cycle(&ego, plant.steering) {
            Ok(o) => o,
            Err(e) => {
                trace.failure = Some(FailureRecord { t, message: e.to_string() });
                break;
            }
        };
        trace.ticks.push(record(t, &plant, &out, world, solve_calls() - qp0, forward_calls() - mlp0));
        if !on_cycle(t, &plant, &out) || k == cycles {
            break;
        }
        for _ in 0..PLANT_SUBSTEPS {
            let cmd = track_trajectory(&plant, &out.active, &cfg.controller);
            before = plant;
            plant = step_plant(&plant, cmd, sub_dt, cfg.controller.delta_max);
        }
    }
    Ok(trace)
}

pub fn run_closed_loop(scn: &Scenario, cfg: &StackConfig, mode: Mode, model: Option<&MlpModel>) -> Result<SimTrace> {
    let world = World::new(scn)?;
    run_with(scn, &world, cfg, mode, model, |_, _, _| true)
}
