use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use hybrid_planner::neural::train::{planner_baseline, read_dataset, split_indices, write_dataset};
use hybrid_planner::neural::{train, MlpDims, MlpModel, TrainerConfig, TrainingSample};
use hybrid_planner::sim::expert::generate_dataset;
use hybrid_planner::sim::metrics::metrics_in;
use hybrid_planner::sim::run::run_with;
use hybrid_planner::sim::stack::CycleOutput;
use hybrid_planner::sim::{
    compute_metrics, load_scenario, read_trace, write_trace, MetricsReport, Mode, Scenario, StackConfig, World,
};

#[derive(Parser)]
#[command(name = "hybrid-planner", version, about = "Hybrid motion planner and closed-loop simulator")]
struct Cli {
    /// JSON file overriding stack parameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Trained refiner model, needed by hybrid and nn_only.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the route and corridor summary of a scenario.
    Route { scenario: PathBuf },
    /// Run until time `t` and dump every intermediate of that planning cycle.
    Plan {
        scenario: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value = "hybrid")]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop run; writes the trace and prints the metrics.
    Simulate {
        scenario: PathBuf,
        #[arg(long, default_value = "hybrid")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Generate imitation samples from every scenario in a directory.
    GenData {
        scenario_dir: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the refiner on a dataset.
    TrainMlp {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0.1)]
        dropout: f64,
        #[arg(long)]
        validation_fraction: Option<f64>,
    },
    /// Metrics of a stored trace.
    Score { trace: PathBuf, scenario: PathBuf },
    /// Side-by-side metrics of two traces of the same scenario.
    Compare {
        trace_a: PathBuf,
        trace_b: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
    },
}

/// Exit code 1 for bad input, 2 for failures while running.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

type Res<T> = Result<T, Failure>;

fn invalid<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Validation(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn sim_err(e: hybrid_planner::sim::SimError) -> Failure {
    if e.is_validation() {
        invalid(e)
    } else {
        runtime(e)
    }
}

fn load_config(path: Option<&Path>) -> Res<StackConfig> {
    match path {
        None => Ok(StackConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(invalid)?;
            StackConfig::from_json(&text).map_err(|e| invalid(anyhow!("{}: {e}", p.display())))
        }
    }
}

fn load_model(path: Option<&Path>, mode: Mode) -> Res<Option<MlpModel>> {
    match (path, mode.uses_model()) {
        (Some(p), true) => MlpModel::load(p)
            .map(Some)
            .map_err(|e| invalid(anyhow!("{}: {e}", p.display()))),
        (None, true) => Err(invalid(anyhow!("mode {mode} needs --model"))),
        _ => Ok(None),
    }
}

fn scenario(path: &Path) -> Res<Scenario> {
    load_scenario(path).map_err(|e| invalid(anyhow!("{}: {e}", path.display())))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn write_json(path: &Path, v: &serde_json::Value) -> Res<()> {
    std::fs::write(path, serde_json::to_string_pretty(v).expect("json"))
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn cycle_json(t: f64, out: &CycleOutput) -> serde_json::Value {
    let pts = |tr: &hybrid_planner::geometry::Trajectory| serde_json::to_value(tr.points()).expect("json");
    json!({
        "t": t,
        "lead": out.lead,
        "lead_safe_distance": out.lead_safe_distance,
        "candidates": out.candidates.iter().map(|c| json!({
            "speed_fraction": c.speed_fraction,
            "lateral_offset": c.lateral_offset,
            "target_speed": c.target_speed,
            "score": c.score,
            "trajectory": pts(&c.trajectory),
        })).collect::<Vec<_>>(),
        "selection": { "index": out.selection.index, "max_brake": out.selection.max_brake, "trajectory": pts(&out.selection.trajectory) },
        "nn_trajectory": out.nn_trajectory.as_ref().map(pts),
        "speed_profile": out.speed_profile,
        "mpt": out.mpt.as_ref().map(|m| json!({
            "trajectory": pts(&m.trajectory),
            "used_fallback": m.used_fallback,
            "objective_value": m.objective_value,
            "kkt_residual": m.kkt_residual,
            "steering": m.steering,
            "pinned": m.pinned,
            "failure": m.failure,
            "rejected": m.rejected.as_ref().map(pts),
            "qp": m.qp,
        })),
        "active": pts(&out.active),
    })
}

fn scenario_files(dir: &Path) -> Res<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(invalid)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid(anyhow!("no scenario files in {}", dir.display())));
    }
    Ok(files)
}

fn metrics_row(name: &str, a: f64, b: f64) -> String {
    format!("{name:<28} {a:>14.4} {b:>14.4} {:>14.4}", b - a)
}

fn compare_table(a: &MetricsReport, b: &MetricsReport) -> String {
    let opt = |x: Option<f64>| x.unwrap_or(f64::NAN);
    let rows = [
        ("collisions", a.collisions as f64, b.collisions as f64),
        ("boundary_violations", a.boundary_violations as f64, b.boundary_violations as f64),
        ("progress_m", a.progress_m, b.progress_m),
        ("peak_jerk", a.peak_jerk, b.peak_jerk),
        ("peak_lat_accel", a.peak_lat_accel, b.peak_lat_accel),
        ("peak_lat_jerk", a.peak_lat_jerk, b.peak_lat_jerk),
        ("min_gap_vs_safe_distance", opt(a.min_gap_vs_safe_distance), opt(b.min_gap_vs_safe_distance)),
        ("min_boundary_margin", a.min_boundary_margin, b.min_boundary_margin),
        ("completion", a.completion as u8 as f64, b.completion as u8 as f64),
        ("fallback_cycles", a.fallback_cycles as f64, b.fallback_cycles as f64),
    ];
    let mut out = format!("{:<28} {:>14} {:>14} {:>14}\n", "metric", "A", "B", "B - A");
    for (n, x, y) in rows {
        out.push_str(&metrics_row(n, x, y));
        out.push('\n');
    }
    out
}

fn run(cli: Cli) -> Res<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Route { scenario: path } => {
            let scn = scenario(&path)?;
            let world = World::new(&scn).map_err(sim_err)?;
            print_json(&json!({
                "scenario": scn.name,
                "lanes": world.route.lane_ids,
                "length_m": world.length(),
                "stations": world.corridor.stations.len(),
                "min_corridor_width": world.corridor.left_limit.iter().zip(&world.corridor.right_limit)
                    .map(|(l, r)| l - r).fold(f64::INFINITY, f64::min),
            }));
        }
        Cmd::Plan { scenario: path, t, mode, out } => {
            let scn = scenario(&path)?;
            let model = load_model(cli.model.as_deref(), mode)?;
            let world = World::new(&scn).map_err(sim_err)?;
            let mut cfg = cfg.clone();
            cfg.mpt.record_qp = true;
            let mut dump = None;
            let trace = run_with(&scn, &world, &cfg, mode, model.as_ref(), |now, _, o| {
                if now >= t - 1e-9 {
                    dump = Some(cycle_json(now, o));
                    return false;
                }
                true
            })
            .map_err(sim_err)?;
            let dump = match (dump, trace.failure) {
                (Some(d), _) => d,
                (None, Some(f)) => return Err(runtime(anyhow!("run failed at t={}: {}", f.t, f.message))),
                (None, None) => return Err(invalid(anyhow!("t={t} is past the scenario duration"))),
            };
            match out {
                Some(p) => write_json(&p, &dump)?,
                None => print_json(&dump),
            }
        }
        Cmd::Simulate { scenario: path, mode, out, metrics } => {
            let scn = scenario(&path)?;
            let model = load_model(cli.model.as_deref(), mode)?;
            let world = World::new(&scn).map_err(sim_err)?;
            let trace = run_with(&scn, &world, &cfg, mode, model.as_ref(), |_, _, _| true).map_err(sim_err)?;
            write_trace(&out, &trace).map_err(runtime)?;
            let report = metrics_in(&trace, &world).map_err(sim_err)?;
            let v = serde_json::to_value(&report).expect("json");
            match metrics {
                Some(p) => write_json(&p, &v)?,
                None => print_json(&v),
            }
            if let Some(f) = trace.failure {
                return Err(runtime(anyhow!("run failed at t={}: {}", f.t, f.message)));
            }
        }
        Cmd::GenData { scenario_dir, n, out, seed } => {
            let scns = scenario_files(&scenario_dir)?.iter().map(|p| scenario(p)).collect::<Res<Vec<_>>>()?;
            let data = generate_dataset(&scns, n, seed, &cfg).map_err(sim_err)?;
            write_dataset(&out, &data).map_err(runtime)?;
            log::info!("wrote {} samples to {}", data.len(), out.display());
        }
        Cmd::TrainMlp { data, out, seed, epochs, lr, dropout, validation_fraction } => {
            let samples = read_dataset(&data).map_err(|e| invalid(anyhow!("{}: {e}", data.display())))?;
            let defaults = TrainerConfig::default();
            let tcfg = TrainerConfig {
                learning_rate: lr.unwrap_or(defaults.learning_rate),
                epochs,
                seed,
                validation_fraction: validation_fraction.unwrap_or(defaults.validation_fraction),
                ..defaults
            };
            tcfg.validate().map_err(invalid)?;
            let model = MlpModel::new(MlpDims::default(), dropout, seed).map_err(invalid)?;
            let (model, hist) = train(model, &samples, &tcfg).map_err(runtime)?;
            model.save(&out).map_err(runtime)?;
            let (_, val_idx) = split_indices(samples.len(), &tcfg);
            let val: Vec<&TrainingSample> = val_idx.iter().map(|&i| &samples[i]).collect();
            let baseline = if val.is_empty() { None } else { Some(planner_baseline(&val).map_err(runtime)?) };
            print_json(&json!({
                "train_loss": hist.train,
                "validation_loss": hist.validation,
                "validation_planner_baseline": baseline,
            }));
        }
        Cmd::Score { trace, scenario: path } => {
            let scn = scenario(&path)?;
            let tr = read_trace(&trace).map_err(|e| invalid(anyhow!("{}: {e}", trace.display())))?;
            let report = compute_metrics(&tr, &scn).map_err(sim_err)?;
            print_json(&serde_json::to_value(&report).expect("json"));
        }
        Cmd::Compare { trace_a, trace_b, scenario: path } => {
            let scn = scenario(&path)?;
            let world = World::new(&scn).map_err(sim_err)?;
            let read = |p: &Path| read_trace(p).map_err(|e| invalid(anyhow!("{}: {e}", p.display())));
            let a = metrics_in(&read(&trace_a)?, &world).map_err(sim_err)?;
            let b = metrics_in(&read(&trace_b)?, &world).map_err(sim_err)?;
            print!("{}", compare_table(&a, &b));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
