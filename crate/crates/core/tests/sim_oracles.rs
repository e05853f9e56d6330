use std::f64::consts::PI;
use std::path::PathBuf;

use hybrid_planner::geometry::{EgoState, Pose2D, Trajectory, TrajectoryPoint, Vec2};
use hybrid_planner::neural::MlpModel;
use hybrid_planner::sim::corpus::{self, S_CURVE_APEXES};
use hybrid_planner::sim::expert::{generate_dataset, run_expert};
use hybrid_planner::sim::metrics::metrics_in;
use hybrid_planner::sim::run::{CandidateRecord, TickRecord};
use hybrid_planner::sim::scenario::ScenarioFile;
use hybrid_planner::sim::{
    compute_metrics, load_scenario, read_trace, run_closed_loop, save_scenario, step_plant, track_trajectory, Command,
    ControllerGains, Mode, PlantState, Scenario, SimTrace, StackConfig, World,
};

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn shipped_model() -> MlpModel {
    MlpModel::load(&repo_path("models/default.bin")).expect("shipped model")
}

fn plant(x: f64, y: f64, heading: f64, speed: f64, steering: f64) -> PlantState {
    PlantState { pose: Pose2D::new(x, y, heading), speed, steering, wheelbase: 2.7 }
}

#[test]
fn standing_plant_does_not_move() {
    let s = plant(3.0, -1.0, 0.4, 0.0, 0.3);
    let n = step_plant(&s, Command { accel: 0.0, steering_rate: 0.5 }, 0.01, 0.6);
    assert_eq!(n.pose, s.pose);
    assert_eq!(n.speed, 0.0);
}

#[test]
fn constant_steering_traces_the_bicycle_circle() {
    let delta: f64 = 0.2;
    let radius = 2.7 / delta.tan();
    let v = 5.0;
    let dt = 0.01;
    let steps = (2.0 * PI * radius / v / dt).ceil() as usize;
    let mut s = plant(0.0, 0.0, 0.0, v, delta);
    let center = Vec2::new(0.0, radius);
    for _ in 0..steps {
        s = step_plant(&s, Command { accel: 0.0, steering_rate: 0.0 }, dt, 0.6);
        let r = (s.pose.position() - center).norm();
        assert!((r - radius).abs() <= 1e-3 * radius, "radius {r} vs {radius}");
    }
}

#[test]
fn halving_the_step_shows_fourth_order_convergence() {
    let s = plant(0.0, 0.0, 0.1, 6.0, 0.35);
    let cmd = Command { accel: 1.0, steering_rate: 0.0 };
    let gap = |h: f64| {
        let full = step_plant(&s, cmd, h, 0.6);
        let half = step_plant(&step_plant(&s, cmd, h / 2.0, 0.6), cmd, h / 2.0, 0.6);
        (full.pose.position() - half.pose.position()).norm() + (full.pose.heading - half.pose.heading).abs()
    };
    let (e1, e2) = (gap(0.2), gap(0.1));
    assert!(e1 < 1e-4, "{e1}");
    // local error O(h^5): halving h shrinks the gap by ~32
    assert!(e1 / e2 > 16.0, "ratio {}", e1 / e2);
}

fn straight_trajectory(v: f64) -> Trajectory {
    let pts = (0..80)
        .map(|k| TrajectoryPoint {
            pose: Pose2D::new(v * 0.1 * k as f64, 0.0, 0.0),
            t: 0.1 * k as f64,
            speed: v,
            accel: 0.0,
            curvature: 0.0,
        })
        .collect();
    Trajectory::new(pts, 0.1).unwrap()
}

#[test]
fn on_trajectory_commands_are_zero() {
    let c = track_trajectory(&plant(10.0, 0.0, 0.0, 5.0, 0.0), &straight_trajectory(5.0), &ControllerGains::default());
    assert!(c.accel.abs() < 1e-9 && c.steering_rate.abs() < 1e-9, "{c:?}");
}

#[test]
fn left_offset_steers_right() {
    let c = track_trajectory(&plant(10.0, 0.5, 0.0, 5.0, 0.0), &straight_trajectory(5.0), &ControllerGains::default());
    assert!(c.steering_rate < 0.0, "{c:?}");
}

#[test]
fn closed_loop_circle_error_is_small() {
    let radius = 20.0;
    let v = 5.0;
    let n = 400;
    let pts = (0..n)
        .map(|k| {
            let a = v * 0.1 * k as f64 / radius;
            TrajectoryPoint {
                pose: Pose2D::new(radius * a.sin(), radius * (1.0 - a.cos()), a),
                t: 0.1 * k as f64,
                speed: v,
                accel: 0.0,
                curvature: 1.0 / radius,
            }
        })
        .collect();
    let traj = Trajectory::new(pts, 0.1).unwrap();
    let g = ControllerGains::default();
    let mut s = plant(0.0, 0.0, 0.0, v, 0.0);
    let center = Vec2::new(0.0, radius);
    for k in 0..3000 {
        s = step_plant(&s, track_trajectory(&s, &traj, &g), 0.01, g.delta_max);
        if k >= 1000 {
            let e = ((s.pose.position() - center).norm() - radius).abs();
            assert!(e < 0.2, "lateral error {e} at step {k}");
        }
    }
}

#[test]
fn shipped_straight_scenario_loads_with_a_route() {
    let scn = load_scenario(&repo_path("scenarios/straight.json")).unwrap();
    let world = World::new(&scn).unwrap();
    assert!(world.length() > 100.0);
    assert_eq!(world.route.lane_ids.first().map(String::as_str), Some("l0"));
}

#[test]
fn missing_successor_is_named() {
    let mut f = corpus::straight();
    f.lanes[0].successors = vec!["ghost_lane".into()];
    let e = f.into_scenario().unwrap_err();
    assert!(e.is_validation());
    let msg = e.to_string();
    assert!(msg.contains("ghost_lane") && msg.contains("/lanes/0"), "{msg}");
}

#[test]
fn scenario_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    for f in corpus::shipped() {
        let scn = f.into_scenario().unwrap();
        let path = dir.path().join("s.json");
        save_scenario(&scn, &path).unwrap();
        assert_eq!(load_scenario(&path).unwrap(), scn);
    }
}

#[test]
fn corpus_files_match_their_builders() {
    for (dir, files) in [("scenarios", corpus::shipped()), ("scenarios/train", corpus::training())] {
        for f in files {
            let path = repo_path(&format!("{dir}/{}.json", f.name));
            let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let on_disk: ScenarioFile = serde_json::from_str(&text).unwrap();
            assert_eq!(on_disk, f, "{} is stale; rerun the write_corpus example", path.display());
        }
    }
}

fn tick(t: f64, pose: Pose2D, speed: f64) -> TickRecord {
    TickRecord {
        t,
        plant: PlantState { pose, speed, steering: 0.0, wheelbase: 2.7 },
        candidates: vec![CandidateRecord {
            fraction: 0.0,
            offset: 0.0,
            score: 0.0,
            ttc: None,
            compliance: 1.0,
            progress: 0.0,
        }],
        selected: 0,
        max_brake: false,
        lead: None,
        nn_trajectory: None,
        mpt_trajectory: None,
        used_fallback: None,
        kkt_residual: None,
        pin_error: None,
        mpt_failure: None,
        qp_calls: 0,
        mlp_calls: 0,
        agents: Vec::new(),
    }
}

fn straight_scenario() -> Scenario {
    corpus::straight().into_scenario().unwrap()
}

#[test]
fn stationary_trace_scores_zero() {
    let scn = straight_scenario();
    let trace = SimTrace { ticks: (0..50).map(|k| tick(0.1 * k as f64, scn.ego_start.pose, 0.0)).collect(), failure: None };
    let m = compute_metrics(&trace, &scn).unwrap();
    assert_eq!((m.collisions, m.boundary_violations), (0, 0));
    assert_eq!((m.progress_m, m.peak_jerk, m.peak_lat_accel, m.peak_lat_jerk), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(m.min_gap_vs_safe_distance, None);
    assert!(!m.completion);
}

#[test]
fn one_overlapping_tick_is_one_collision() {
    let scn = corpus::static_obstacle().into_scenario().unwrap();
    let mut ticks: Vec<TickRecord> = (0..20).map(|k| tick(0.1 * k as f64, Pose2D::new(10.0 + k as f64, 0.0, 0.0), 0.0)).collect();
    // obstacle spans x 58..62, y -1.8..-0.2
    ticks[7].plant.pose = Pose2D::new(58.0, -1.0, 0.0);
    let m = compute_metrics(&SimTrace { ticks, failure: None }, &scn).unwrap();
    assert_eq!(m.collisions, 1);
}

#[test]
fn minimum_jerk_profile_peak_jerk() {
    let scn = straight_scenario();
    let (v0, v1, dur) = (1.0, 6.0, 5.0);
    let speed = |t: f64| {
        let u = (t / dur).clamp(0.0, 1.0);
        v0 + (v1 - v0) * (10.0 * u.powi(3) - 15.0 * u.powi(4) + 6.0 * u.powi(5))
    };
    let dt = 0.1;
    let mut x = 5.0;
    let mut ticks = Vec::new();
    for k in 0..=60 {
        let t = k as f64 * dt;
        ticks.push(tick(t, Pose2D::new(x, 0.0, 0.0), speed(t)));
        x += 0.5 * (speed(t) + speed(t + dt)) * dt;
    }
    let m = compute_metrics(&SimTrace { ticks, failure: None }, &scn).unwrap();
    // max |d2v/dt2| of the quintic is 10/sqrt(3) * dv / T^2
    let expected = 10.0 / 3f64.sqrt() * (v1 - v0) / (dur * dur);
    assert!((m.peak_jerk - expected).abs() <= 0.02 * expected, "{} vs {expected}", m.peak_jerk);
}

fn short(mut f: ScenarioFile, duration: f64) -> Scenario {
    f.duration_s = duration;
    f.into_scenario().unwrap()
}

#[test]
fn same_inputs_give_identical_trace_bytes() {
    let scn = short(corpus::s_curve(), 6.0);
    let cfg = StackConfig::default();
    let a = run_closed_loop(&scn, &cfg, Mode::OptimizerOnly, None).unwrap();
    let b = run_closed_loop(&scn, &cfg, Mode::OptimizerOnly, None).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
}

#[test]
fn modes_keep_to_their_components() {
    let scn = short(corpus::s_curve(), 3.0);
    let cfg = StackConfig::default();
    let model = shipped_model();
    let nn = run_closed_loop(&scn, &cfg, Mode::NnOnly, Some(&model)).unwrap();
    assert!(nn.ticks.iter().all(|t| t.qp_calls == 0 && t.mlp_calls > 0));
    let opt = run_closed_loop(&scn, &cfg, Mode::OptimizerOnly, None).unwrap();
    assert!(opt.ticks.iter().all(|t| t.mlp_calls == 0 && t.qp_calls > 0));
    assert!(run_closed_loop(&scn, &cfg, Mode::Hybrid, None).is_err());
}

#[test]
fn persisted_trace_reproduces_online_metrics() {
    let scn = short(corpus::acc(), 8.0);
    let world = World::new(&scn).unwrap();
    let trace = run_closed_loop(&scn, &StackConfig::default(), Mode::OptimizerOnly, None).unwrap();
    let online = metrics_in(&trace, &world).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    hybrid_planner::sim::write_trace(&path, &trace).unwrap();
    let back = read_trace(&path).unwrap();
    assert_eq!(back, trace);
    assert_eq!(compute_metrics(&back, &scn).unwrap(), online);
    assert!(online.min_gap_vs_safe_distance.is_some());
}

#[test]
fn hybrid_drives_the_empty_straight_road() {
    let scn = straight_scenario();
    let trace = run_closed_loop(&scn, &StackConfig::default(), Mode::Hybrid, Some(&shipped_model())).unwrap();
    let m = compute_metrics(&trace, &scn).unwrap();
    assert_eq!((m.collisions, m.boundary_violations), (0, 0));
    assert!(m.completion, "{m:?}");
}

fn lateral(world: &World, ego: &EgoState) -> (f64, f64) {
    world.station(&ego.pose.position()).unwrap()
}

#[test]
fn expert_keeps_to_the_centerline_on_a_straight() {
    let scn = straight_scenario();
    let world = World::new(&scn).unwrap();
    let ticks = run_expert(&scn, &world, &StackConfig::default()).unwrap();
    let worst = ticks.iter().map(|t| lateral(&world, &t.ego).1.abs()).fold(0.0, f64::max);
    assert!(worst < 0.1, "max |d| {worst}");
}

#[test]
fn expert_cuts_toward_the_inside_of_bends() {
    let scn = corpus::s_curve().into_scenario().unwrap();
    let world = World::new(&scn).unwrap();
    let ticks = run_expert(&scn, &world, &StackConfig::default()).unwrap();
    let sd: Vec<(f64, f64)> = ticks.iter().map(|t| lateral(&world, &t.ego)).collect();
    for (apex, side) in S_CURVE_APEXES {
        let at = sd.iter().min_by(|a, b| (a.0 - apex).abs().total_cmp(&(b.0 - apex).abs())).unwrap();
        assert!(at.1 * side >= 0.2, "apex {apex}: offset {}", at.1);
    }
}

#[test]
fn expert_samples_have_the_model_shapes() {
    let scn = short(corpus::training()[1].clone(), 12.0);
    let data = generate_dataset(&[scn], 25, 3, &StackConfig::default()).unwrap();
    assert_eq!(data.len(), 25);
    for s in &data {
        assert_eq!(s.features.history.len(), 90);
        assert_eq!(s.features.path.len(), 80);
        assert_eq!(s.target.len(), 80);
        assert_eq!(s.planner.len(), 80);
        s.features.validate().unwrap();
    }
}
