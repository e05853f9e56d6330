//! The shipped evaluation scenarios and the separate maps used to generate
//! imitation data.

use super::roads::{constant_width, road_lanes, spine, Piece, WidthKnots};
use super::scenario::{AgentFile, AgentWaypoint, ScenarioFile, SCHEMA_VERSION};
use crate::geometry::{EgoState, Footprint, Pose2D, Vec2};

/// Car-sized box centered on the agent's reference point.
fn car_outline() -> Vec<Vec2> {
    vec![Vec2::new(-2.25, -0.9), Vec2::new(2.25, -0.9), Vec2::new(2.25, 0.9), Vec2::new(-2.25, 0.9)]
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Vec2> {
    vec![Vec2::new(x0, y0), Vec2::new(x1, y0), Vec2::new(x1, y1), Vec2::new(x0, y1)]
}

struct RoadScenario {
    name: &'static str,
    pieces: Vec<Piece>,
    widths: WidthKnots,
    speed_limit: f64,
    /// Ego start station and speed.
    start_s: f64,
    v0: f64,
    duration_s: f64,
}

impl RoadScenario {
    fn build(self) -> ScenarioFile {
        let lanes = road_lanes("l", Pose2D::default(), &self.pieces, &self.widths, self.speed_limit, 40.0);
        let pts = spine(Pose2D::default(), &self.pieces, 0.5);
        let start = pts.iter().find(|(s, _)| *s >= self.start_s).map_or(pts[0].1, |p| p.1);
        ScenarioFile {
            version: SCHEMA_VERSION,
            name: self.name.to_string(),
            goal_lane: lanes.last().expect("at least one lane").id.clone(),
            lanes,
            ego_start: EgoState { vel_lon: self.v0, ..EgoState::at_rest(start, 0.0) },
            static_obstacles: Vec::new(),
            dynamic_agents: Vec::new(),
            duration_s: self.duration_s,
            seed: 0,
            footprint: Footprint::default(),
        }
    }
}

/// Agent on a straight road along +x: cruises, brakes to a stop, waits,
/// then pulls away again. Waypoints every 0.25 s.
fn stop_and_go(x0: f64, y: f64, v: f64, brake_at: f64, decel: f64, wait: f64, accel: f64, until: f64) -> Vec<AgentWaypoint> {
    let t_stop = brake_at + v / decel;
    let t_go = t_stop + wait;
    let t_up = t_go + v / accel;
    let x_at = |t: f64| {
        if t <= brake_at {
            x0 + v * t
        } else if t <= t_stop {
            let u = t - brake_at;
            x0 + v * brake_at + v * u - 0.5 * decel * u * u
        } else if t <= t_go {
            x0 + v * brake_at + v * v / (2.0 * decel)
        } else if t <= t_up {
            let u = t - t_go;
            x0 + v * brake_at + v * v / (2.0 * decel) + 0.5 * accel * u * u
        } else {
            x0 + v * brake_at + v * v / (2.0 * decel) + v * v / (2.0 * accel) + v * (t - t_up)
        }
    };
    let n = (until / 0.25).round() as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 * 0.25;
            AgentWaypoint { t, x: x_at(t), y }
        })
        .collect()
}

fn constant_speed(x0: f64, y: f64, v: f64, until: f64) -> Vec<AgentWaypoint> {
    vec![AgentWaypoint { t: 0.0, x: x0, y }, AgentWaypoint { t: until, x: x0 + v * until, y }]
}

pub fn straight() -> ScenarioFile {
    RoadScenario {
        name: "straight",
        pieces: vec![Piece::Straight(160.0)],
        widths: constant_width(1.75),
        speed_limit: 8.0,
        start_s: 5.0,
        v0: 0.0,
        duration_s: 30.0,
    }
    .build()
}

/// Station of the apex of each bend of [`s_curve`].
pub const S_CURVE_APEXES: [(f64, f64); 2] = [(30.0 + 15.0, 1.0), (30.0 + 30.0 + 5.0 + 15.0, -1.0)];

/// Left then right bend of radius 25 m in a narrow lane.
pub fn s_curve() -> ScenarioFile {
    RoadScenario {
        name: "s_curve",
        pieces: vec![
            Piece::Straight(30.0),
            Piece::Arc { radius: 25.0, angle: 1.2 },
            Piece::Straight(5.0),
            Piece::Arc { radius: 25.0, angle: -1.2 },
            Piece::Straight(50.0),
        ],
        widths: constant_width(1.75),
        speed_limit: 7.0,
        start_s: 5.0,
        v0: 4.0,
        duration_s: 28.0,
    }
    .build()
}

/// Right bound steps in by 2.2 m for 25 m.
pub fn bound_step() -> ScenarioFile {
    RoadScenario {
        name: "bound_step",
        pieces: vec![Piece::Straight(150.0)],
        widths: vec![(0.0, 2.5, 2.5), (50.0, 2.5, 2.5), (52.0, 2.5, 0.3), (77.0, 2.5, 0.3), (79.0, 2.5, 2.5)],
        speed_limit: 7.0,
        start_s: 5.0,
        v0: 3.0,
        duration_s: 30.0,
    }
    .build()
}

/// Box on the right half of a wide lane.
pub fn static_obstacle() -> ScenarioFile {
    let mut f = RoadScenario {
        name: "static_obstacle",
        pieces: vec![Piece::Straight(150.0)],
        widths: constant_width(2.5),
        speed_limit: 7.0,
        start_s: 5.0,
        v0: 3.0,
        duration_s: 30.0,
    }
    .build();
    f.static_obstacles.push(rect(58.0, -1.8, 62.0, -0.2));
    f
}

/// Follows a lead that brakes to a stop, waits and pulls away.
pub fn acc() -> ScenarioFile {
    let mut f = RoadScenario {
        name: "acc",
        pieces: vec![Piece::Straight(260.0)],
        widths: constant_width(1.75),
        speed_limit: 8.0,
        start_s: 5.0,
        v0: 6.0,
        duration_s: 35.0,
    }
    .build();
    f.dynamic_agents.push(AgentFile {
        id: "lead".into(),
        footprint: car_outline(),
        waypoints: stop_and_go(42.0, 0.0, 6.0, 8.0, 1.5, 3.0, 1.0, 40.0),
    });
    f
}

/// Evaluation corpus: one scenario per experiment family.
pub fn shipped() -> Vec<ScenarioFile> {
    vec![straight(), s_curve(), bound_step(), static_obstacle(), acc()]
}

/// Maps used for imitation data. None of them is an evaluation map.
pub fn training() -> Vec<ScenarioFile> {
    let road = |name, pieces, half: f64, limit, v0| RoadScenario {
        name,
        pieces,
        widths: constant_width(half),
        speed_limit: limit,
        start_s: 5.0,
        v0,
        duration_s: 24.0,
    };
    let arc = |r: f64, a: f64| Piece::Arc { radius: r, angle: a };
    let st = Piece::Straight;
    let curves = vec![
        ("train_left_r40", vec![st(25.0), arc(40.0, 1.1), st(80.0)], 1.9, 7.5, 5.0),
        ("train_right_r40", vec![st(25.0), arc(40.0, -1.1), st(80.0)], 1.9, 7.5, 5.0),
        ("train_left_r30", vec![st(20.0), arc(30.0, 0.9), st(90.0)], 2.0, 7.0, 3.0),
        ("train_right_r32", vec![st(20.0), arc(32.0, -1.0), st(90.0)], 2.0, 7.0, 6.0),
        ("train_right_r60", vec![st(15.0), arc(60.0, -0.9), st(70.0)], 1.8, 8.0, 6.0),
        ("train_chicane_r50", vec![st(20.0), arc(50.0, 0.7), st(15.0), arc(50.0, -0.7), st(50.0)], 1.9, 8.0, 4.0),
        ("train_wiggle_r35", vec![st(10.0), arc(35.0, -0.6), st(20.0), arc(35.0, 0.8), st(60.0)], 2.1, 7.0, 2.0),
        ("train_left_r26", vec![st(20.0), arc(26.0, 1.0), st(80.0)], 1.8, 7.0, 4.0),
        ("train_right_r24", vec![st(25.0), arc(24.0, -0.9), st(80.0)], 1.9, 6.5, 5.0),
        ("train_s_r28", vec![st(20.0), arc(28.0, 1.0), st(8.0), arc(28.0, -1.0), st(60.0)], 1.8, 7.0, 5.0),
        ("train_s_r24", vec![st(25.0), arc(24.0, -1.1), st(10.0), arc(24.0, 1.1), st(50.0)], 1.9, 6.5, 3.0),
    ];
    let mut out = vec![road("train_straight", vec![st(170.0)], 2.0, 8.0, 0.0).build()];
    for (name, pieces, half, limit, v0) in curves {
        // reflected twin so both bend directions are equally represented
        let flipped = pieces
            .iter()
            .map(|p| match *p {
                Piece::Arc { radius, angle } => Piece::Arc { radius, angle: -angle },
                Piece::Straight(l) => Piece::Straight(l),
            })
            .collect();
        out.push(road(name, pieces, half, limit, v0).build());
        let mut m = road(name, flipped, half, limit, v0).build();
        m.name = format!("{name}_mirror");
        out.push(m);
    }
    let mut obstacle_left = road("train_obstacle_left", vec![st(150.0)], 2.5, 7.0, 4.0).build();
    obstacle_left.static_obstacles.push(rect(50.0, 0.2, 54.0, 1.8));
    out.push(obstacle_left);
    let mut obstacle_right = road("train_obstacle_right", vec![st(150.0)], 2.5, 8.0, 0.0).build();
    obstacle_right.static_obstacles.push(rect(70.0, -1.7, 73.0, -0.3));
    out.push(obstacle_right);
    let mut step = RoadScenario {
        name: "train_bound_step_left",
        pieces: vec![st(150.0)],
        widths: vec![(0.0, 2.4, 2.4), (40.0, 2.4, 2.4), (42.0, 0.4, 2.4), (60.0, 0.4, 2.4), (62.0, 2.4, 2.4)],
        speed_limit: 7.0,
        start_s: 5.0,
        v0: 5.0,
        duration_s: 24.0,
    }
    .build();
    step.name = "train_bound_step_left".into();
    out.push(step);
    let mut lead = road("train_lead_slow", vec![st(220.0)], 1.8, 8.0, 7.0).build();
    lead.duration_s = 30.0;
    lead.dynamic_agents.push(AgentFile {
        id: "lead".into(),
        footprint: car_outline(),
        waypoints: constant_speed(35.0, 0.0, 4.0, 40.0),
    });
    out.push(lead);
    let mut stop_go = road("train_lead_stop_go", vec![st(220.0)], 1.8, 8.0, 5.0).build();
    stop_go.duration_s = 30.0;
    stop_go.dynamic_agents.push(AgentFile {
        id: "lead".into(),
        footprint: car_outline(),
        waypoints: stop_and_go(30.0, 0.0, 5.0, 5.0, 1.0, 4.0, 1.5, 40.0),
    });
    out.push(stop_go);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_loads() {
        for f in shipped().into_iter().chain(training()) {
            let name = f.name.clone();
            f.into_scenario().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn stop_and_go_is_continuous() {
        let w = stop_and_go(0.0, 0.0, 6.0, 2.0, 1.5, 1.0, 1.0, 20.0);
        for p in w.windows(2) {
            let v = (p[1].x - p[0].x) / (p[1].t - p[0].t);
            assert!((-1e-9..=6.0 + 1e-9).contains(&v));
        }
    }
}
