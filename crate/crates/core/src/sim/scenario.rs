//! Scenario files: lane network, ego start, obstacles and scripted agents.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, SimError};
use crate::geometry::{ConvexPolygon, EgoState, Footprint, Polyline, Pose2D, Vec2};
use crate::lane::{corridor_along, shortest_route, Lane, LaneError, LaneGraph};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentWaypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// Agent moving through a time-stamped waypoint schedule. Between
/// waypoints motion is linear; before the first and after the last the
/// agent holds position. Heading follows the direction of travel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicAgent {
    pub id: String,
    /// Outline in the agent's body frame, origin at its reference point.
    pub footprint: ConvexPolygon,
    pub waypoints: Vec<AgentWaypoint>,
}

impl DynamicAgent {
    fn segment(&self, t: f64) -> Option<usize> {
        let w = &self.waypoints;
        if w.len() < 2 || t < w[0].t || t >= w[w.len() - 1].t {
            return None;
        }
        Some(w.partition_point(|p| p.t <= t) - 1)
    }

    fn segment_heading(&self, i: usize) -> Option<f64> {
        let (a, b) = (&self.waypoints[i], &self.waypoints[i + 1]);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        (dx.hypot(dy) > 1e-9).then(|| dy.atan2(dx))
    }

    /// Heading of the nearest moving segment at or before `t`, else after.
    fn heading_at(&self, t: f64) -> f64 {
        let n = self.waypoints.len();
        if n < 2 {
            return 0.0;
        }
        let cur = self.segment(t).unwrap_or(if t < self.waypoints[0].t { 0 } else { n - 2 });
        (0..=cur)
            .rev()
            .find_map(|i| self.segment_heading(i))
            .or_else(|| (cur..n - 1).find_map(|i| self.segment_heading(i)))
            .unwrap_or(0.0)
    }

    pub fn pose_at(&self, t: f64) -> Pose2D {
        let w = &self.waypoints;
        let p = match self.segment(t) {
            Some(i) => {
                let u = (t - w[i].t) / (w[i + 1].t - w[i].t);
                Vec2::new(w[i].x + u * (w[i + 1].x - w[i].x), w[i].y + u * (w[i + 1].y - w[i].y))
            }
            None if t < w[0].t => Vec2::new(w[0].x, w[0].y),
            None => Vec2::new(w[w.len() - 1].x, w[w.len() - 1].y),
        };
        Pose2D::new(p.x, p.y, self.heading_at(t))
    }

    pub fn velocity_at(&self, t: f64) -> Vec2 {
        match self.segment(t) {
            Some(i) => {
                let (a, b) = (&self.waypoints[i], &self.waypoints[i + 1]);
                Vec2::new(b.x - a.x, b.y - a.y) / (b.t - a.t)
            }
            None => Vec2::zeros(),
        }
    }

    pub fn polygon_at(&self, t: f64) -> ConvexPolygon {
        self.footprint.transformed(&self.pose_at(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    pub lane_graph: LaneGraph,
    pub ego_start: EgoState,
    pub goal_lane: String,
    pub static_obstacles: Vec<ConvexPolygon>,
    pub dynamic_agents: Vec<DynamicAgent>,
    pub duration_s: f64,
    pub seed: u64,
    pub footprint: Footprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneFile {
    pub id: String,
    pub centerline: Vec<Vec2>,
    pub left_bound: Vec<Vec2>,
    pub right_bound: Vec<Vec2>,
    pub speed_limit: f64,
    #[serde(default)]
    pub successors: Vec<String>,
}

/// On-disk layout of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub lanes: Vec<LaneFile>,
    pub ego_start: EgoState,
    pub goal_lane: String,
    #[serde(default)]
    pub static_obstacles: Vec<Vec<Vec2>>,
    #[serde(default)]
    pub dynamic_agents: Vec<AgentFile>,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub footprint: Footprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFile {
    pub id: String,
    pub footprint: Vec<Vec2>,
    pub waypoints: Vec<AgentWaypoint>,
}

fn invalid(pointer: impl Into<String>, message: impl Into<String>) -> SimError {
    SimError::Invalid { pointer: pointer.into(), message: message.into() }
}

fn polyline(v: &[Vec2], pointer: String) -> Result<Polyline> {
    Polyline::new(v.to_vec()).map_err(|e| invalid(pointer, e.to_string()))
}

fn polygon(v: &[Vec2], pointer: String) -> Result<ConvexPolygon> {
    ConvexPolygon::new(v.to_vec()).map_err(|e| invalid(pointer, e.to_string()))
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario> {
        if self.version != SCHEMA_VERSION {
            return Err(invalid("/version", format!("unsupported schema version {}", self.version)));
        }
        let mut lanes = Vec::with_capacity(self.lanes.len());
        for (i, l) in self.lanes.iter().enumerate() {
            if self.lanes[..i].iter().any(|o| o.id == l.id) {
                return Err(invalid(format!("/lanes/{i}/id"), format!("duplicate lane id '{}'", l.id)));
            }
            for (j, s) in l.successors.iter().enumerate() {
                if !self.lanes.iter().any(|o| o.id == *s) {
                    return Err(invalid(format!("/lanes/{i}/successors/{j}"), format!("unknown lane id '{s}'")));
                }
            }
            lanes.push(Lane {
                id: l.id.clone(),
                centerline: polyline(&l.centerline, format!("/lanes/{i}/centerline"))?,
                left_bound: polyline(&l.left_bound, format!("/lanes/{i}/left_bound"))?,
                right_bound: polyline(&l.right_bound, format!("/lanes/{i}/right_bound"))?,
                speed_limit: l.speed_limit,
                successors: l.successors.clone(),
            });
        }
        let lane_pointer = |id: &str, field: &str| {
            let i = self.lanes.iter().position(|l| l.id == id).unwrap_or(0);
            format!("/lanes/{i}/{field}")
        };
        let graph = LaneGraph::new(lanes).map_err(|e| match &e {
            LaneError::BadSpeedLimit(id) => invalid(lane_pointer(id, "speed_limit"), e.to_string()),
            LaneError::InconsistentBounds(id) => invalid(lane_pointer(id, "left_bound"), e.to_string()),
            LaneError::SelfLoop(id) => invalid(lane_pointer(id, "successors"), e.to_string()),
            _ => invalid("/lanes", e.to_string()),
        })?;
        if !self.ego_start.is_finite() {
            return Err(invalid("/ego_start", "non-finite ego state"));
        }
        if self.footprint.validate().is_err() {
            return Err(invalid("/footprint", "invalid footprint"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(invalid("/duration_s", "duration must be positive"));
        }
        let static_obstacles = self
            .static_obstacles
            .iter()
            .enumerate()
            .map(|(i, p)| polygon(p, format!("/static_obstacles/{i}")))
            .collect::<Result<Vec<_>>>()?;
        let mut dynamic_agents = Vec::with_capacity(self.dynamic_agents.len());
        for (i, a) in self.dynamic_agents.iter().enumerate() {
            if a.waypoints.is_empty() {
                return Err(invalid(format!("/dynamic_agents/{i}/waypoints"), "no waypoints"));
            }
            if let Some(j) = a.waypoints.windows(2).position(|w| !(w[1].t > w[0].t)) {
                return Err(invalid(
                    format!("/dynamic_agents/{i}/waypoints/{}/t", j + 1),
                    "waypoint times must increase",
                ));
            }
            dynamic_agents.push(DynamicAgent {
                id: a.id.clone(),
                footprint: polygon(&a.footprint, format!("/dynamic_agents/{i}/footprint"))?,
                waypoints: a.waypoints.clone(),
            });
        }
        let scn = Scenario {
            version: self.version,
            name: self.name,
            lane_graph: graph,
            ego_start: self.ego_start,
            goal_lane: self.goal_lane,
            static_obstacles,
            dynamic_agents,
            duration_s: self.duration_s,
            seed: self.seed,
            footprint: self.footprint,
        };
        scn.validate()?;
        Ok(scn)
    }
}

impl Scenario {
    /// Lane containing the ego start.
    pub fn start_lane(&self) -> Result<String> {
        self.lane_graph
            .locate(&self.ego_start.pose.position())
            .map(str::to_string)
            .ok_or_else(|| invalid("/ego_start/pose", "ego start is not on any lane"))
    }

    fn validate(&self) -> Result<()> {
        if self.lane_graph.lane(&self.goal_lane).is_err() {
            return Err(invalid("/goal_lane", format!("unknown lane id '{}'", self.goal_lane)));
        }
        let start = self.start_lane()?;
        let route = shortest_route(&self.lane_graph, &start, &self.goal_lane)
            .map_err(|e| invalid("/goal_lane", format!("goal not reachable from '{start}': {e}")))?;
        let corridor = corridor_along(&self.lane_graph, &route, &self.footprint)
            .map_err(|e| invalid("/lanes", e.to_string()))?;
        if !corridor.footprint_inside(&self.ego_start.pose, &self.footprint) {
            return Err(invalid("/ego_start/pose", "ego start footprint leaves the drivable area"));
        }
        Ok(())
    }

    pub fn to_file(&self) -> ScenarioFile {
        ScenarioFile {
            version: self.version,
            name: self.name.clone(),
            lanes: self
                .lane_graph
                .lanes()
                .map(|l| LaneFile {
                    id: l.id.clone(),
                    centerline: l.centerline.vertices().to_vec(),
                    left_bound: l.left_bound.vertices().to_vec(),
                    right_bound: l.right_bound.vertices().to_vec(),
                    speed_limit: l.speed_limit,
                    successors: l.successors.clone(),
                })
                .collect(),
            ego_start: self.ego_start,
            goal_lane: self.goal_lane.clone(),
            static_obstacles: self.static_obstacles.iter().map(|p| p.vertices().to_vec()).collect(),
            dynamic_agents: self
                .dynamic_agents
                .iter()
                .map(|a| AgentFile {
                    id: a.id.clone(),
                    footprint: a.footprint.vertices().to_vec(),
                    waypoints: a.waypoints.clone(),
                })
                .collect(),
            duration_s: self.duration_s,
            seed: self.seed,
            footprint: self.footprint,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            SimError::Invalid { pointer, message: e.into_inner().to_string() }
        })?;
        file.into_scenario()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("scenario serializes")
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
    Scenario::from_json(&text)
}

pub fn save_scenario(scn: &Scenario, path: &Path) -> Result<()> {
    std::fs::write(path, scn.to_json()).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
}
