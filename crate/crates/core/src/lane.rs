//! Lane network, shortest-route search and drivable corridor extraction.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use thiserror::Error;

use crate::geometry::{
    cross, project_to_path, resample_polyline, ConvexPolygon, Footprint, GeometryError, Polyline,
    Pose2D, Vec2,
};

/// Spacing of route centerline vertices and corridor stations.
pub const STATION_SPACING: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LaneError {
    #[error("unknown lane '{0}'")]
    UnknownLane(String),
    #[error("lane '{0}' lists itself as successor")]
    SelfLoop(String),
    #[error("lane '{lane}': successor '{successor}' does not exist")]
    MissingSuccessor { lane: String, successor: String },
    #[error("lane '{0}': speed limit must be positive")]
    BadSpeedLimit(String),
    #[error("lane '{0}': centerline leaves its bounds")]
    InconsistentBounds(String),
    #[error("no route")]
    NoRoute,
    #[error("route is empty")]
    EmptyRoute,
    #[error("lanes '{from}' -> '{to}' are not connected")]
    NotConnected { from: String, to: String },
    #[error("discontinuous route: gap of {gap:.3} m after lane '{lane}'")]
    DiscontinuousRoute { lane: String, gap: f64 },
    #[error("impassable corridor at s = {0:.2} m")]
    ImpassableCorridor(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = LaneError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: String,
    pub centerline: Polyline,
    pub left_bound: Polyline,
    pub right_bound: Polyline,
    pub speed_limit: f64,
    pub successors: Vec<String>,
}

impl Lane {
    pub fn length(&self) -> f64 {
        self.centerline.length()
    }

    fn validate(&self) -> Result<()> {
        if !(self.speed_limit > 0.0) {
            return Err(LaneError::BadSpeedLimit(self.id.clone()));
        }
        let step = (self.centerline.length() / 20.0).max(1e-3);
        let mut s = 0.0;
        while s <= self.centerline.length() {
            let (p, h) = self.centerline.point_at(s);
            let l = lateral_to_bound(&self.left_bound, &p, h, 1.0);
            let r = lateral_to_bound(&self.right_bound, &p, h, -1.0);
            if !(l > 0.0 && r < 0.0) {
                return Err(LaneError::InconsistentBounds(self.id.clone()));
            }
            s += step;
        }
        Ok(())
    }
}

/// Immutable lane network keyed by lane id.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneGraph {
    lanes: BTreeMap<String, Lane>,
}

impl LaneGraph {
    pub fn new(lanes: Vec<Lane>) -> Result<Self> {
        let lanes: BTreeMap<String, Lane> = lanes.into_iter().map(|l| (l.id.clone(), l)).collect();
        for lane in lanes.values() {
            for succ in &lane.successors {
                if *succ == lane.id {
                    return Err(LaneError::SelfLoop(lane.id.clone()));
                }
                if !lanes.contains_key(succ) {
                    return Err(LaneError::MissingSuccessor {
                        lane: lane.id.clone(),
                        successor: succ.clone(),
                    });
                }
            }
            lane.validate()?;
        }
        Ok(Self { lanes })
    }

    pub fn lane(&self, id: &str) -> Result<&Lane> {
        self.lanes
            .get(id)
            .ok_or_else(|| LaneError::UnknownLane(id.to_string()))
    }

    pub fn lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.values()
    }

    /// Lane whose centerline passes closest to `p` among those whose bounds
    /// contain it; falls back to the plain nearest centerline.
    pub fn locate(&self, p: &Vec2) -> Option<&str> {
        let mut best: Option<(bool, f64, &str)> = None;
        for lane in self.lanes.values() {
            let Ok(f) = project_to_path(&lane.centerline, p, 0.0) else {
                continue;
            };
            let (q, h) = lane.centerline.point_at(f.s);
            let inside = f.d <= lateral_to_bound(&lane.left_bound, &q, h, 1.0)
                && f.d >= lateral_to_bound(&lane.right_bound, &q, h, -1.0)
                && f.s > 0.0
                && f.s < lane.length();
            let cand = (inside, f.d.abs(), lane.id.as_str());
            best = match best {
                None => Some(cand),
                Some(b) if (cand.0 && !b.0) || (cand.0 == b.0 && cand.1 < b.1) => Some(cand),
                keep => keep,
            };
        }
        best.map(|b| b.2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub lane_ids: Vec<String>,
    pub total_length: f64,
}

#[derive(PartialEq)]
struct QueueEntry {
    cost: f64,
    path: Vec<String>,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (cost, lexicographic path)
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.path.cmp(&self.path))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over successor edges weighted by centerline length. Equal-cost
/// routes are ordered by their lane-id sequence.
pub fn shortest_route(graph: &LaneGraph, start: &str, goal: &str) -> Result<Route> {
    let start_lane = graph.lane(start)?;
    graph.lane(goal)?;
    let mut settled: BTreeMap<&str, ()> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    heap.push(QueueEntry {
        cost: start_lane.length(),
        path: vec![start.to_string()],
    });
    while let Some(QueueEntry { cost, path }) = heap.pop() {
        let last = path.last().unwrap().clone();
        if settled.contains_key(last.as_str()) {
            continue;
        }
        let lane = graph.lane(&last)?;
        settled.insert(&lane.id, ());
        if last == goal {
            return Ok(Route {
                lane_ids: path,
                total_length: cost,
            });
        }
        for succ in &lane.successors {
            if settled.contains_key(succ.as_str()) {
                continue;
            }
            let mut next = path.clone();
            next.push(succ.clone());
            heap.push(QueueEntry {
                cost: cost + graph.lane(succ)?.length(),
                path: next,
            });
        }
    }
    Err(LaneError::NoRoute)
}

fn check_route<'a>(graph: &'a LaneGraph, route: &Route) -> Result<Vec<&'a Lane>> {
    if route.lane_ids.is_empty() {
        return Err(LaneError::EmptyRoute);
    }
    let lanes = route
        .lane_ids
        .iter()
        .map(|id| graph.lane(id))
        .collect::<Result<Vec<_>>>()?;
    for w in lanes.windows(2) {
        if !w[0].successors.contains(&w[1].id) {
            return Err(LaneError::NotConnected {
                from: w[0].id.clone(),
                to: w[1].id.clone(),
            });
        }
    }
    Ok(lanes)
}

fn concat(parts: Vec<(&str, &Polyline)>) -> Result<Polyline> {
    let mut pts: Vec<Vec2> = Vec::new();
    let mut prev_id = "";
    for (id, line) in parts {
        let v = line.vertices();
        let mut skip = 0;
        if let Some(last) = pts.last() {
            let gap = (v[0] - last).norm();
            if gap > STATION_SPACING {
                return Err(LaneError::DiscontinuousRoute {
                    lane: prev_id.to_string(),
                    gap,
                });
            }
            if gap <= 1e-6 {
                skip = 1;
            }
        }
        pts.extend_from_slice(&v[skip..]);
        prev_id = id;
    }
    Ok(Polyline::new_dedup(pts, 1e-9)?)
}

/// Concatenated route centerline, resampled at [`STATION_SPACING`].
pub fn route_centerline(graph: &LaneGraph, route: &Route) -> Result<Polyline> {
    let lanes = check_route(graph, route)?;
    let line = concat(lanes.iter().map(|l| (l.id.as_str(), &l.centerline)).collect())?;
    let step = STATION_SPACING.min(line.length());
    Ok(resample_polyline(&line, step)?)
}

/// Signed lateral distance along the normal at `p` (heading `h`) to `bound`.
/// `side` (+1 left, -1 right) picks the preferred ray direction.
fn lateral_to_bound(bound: &Polyline, p: &Vec2, h: f64, side: f64) -> f64 {
    let n = Vec2::new(-h.sin(), h.cos());
    let v = bound.vertices();
    let mut best: Option<f64> = None;
    for w in v.windows(2) {
        let e = w[1] - w[0];
        let denom = cross(&n, &e);
        if denom.abs() < 1e-12 {
            continue;
        }
        // p + t n = w0 + u e
        let r = w[0] - p;
        let t = cross(&r, &e) / denom;
        let u = cross(&r, &n) / denom;
        if (-1e-9..=1.0 + 1e-9).contains(&u) && t * side > 0.0 {
            best = Some(match best {
                Some(b) if b.abs() <= t.abs() => b,
                _ => t,
            });
        }
    }
    best.unwrap_or_else(|| {
        // beyond the bound's extent: fall back to the nearest point
        project_to_path(bound, p, h)
            .map(|f| {
                let (q, _) = bound.point_at(f.s);
                (q - p).dot(&n)
            })
            .unwrap_or(0.0)
    })
}

/// Lateral limits, relative to a reference path, admissible for the vehicle's
/// reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivableCorridor {
    pub reference: Polyline,
    pub stations: Vec<f64>,
    pub left_limit: Vec<f64>,
    pub right_limit: Vec<f64>,
    /// Inflation applied to the raw bounds (half the vehicle width).
    pub inflation: f64,
}

impl DrivableCorridor {
    /// Interpolated `(left, right)` limits at arc length `s`, clamped to the
    /// station range.
    pub fn limits_at(&self, s: f64) -> (f64, f64) {
        let st = &self.stations;
        if s <= st[0] {
            return (self.left_limit[0], self.right_limit[0]);
        }
        let n = st.len();
        if s >= st[n - 1] {
            return (self.left_limit[n - 1], self.right_limit[n - 1]);
        }
        let i = match st.binary_search_by(|a| a.partial_cmp(&s).unwrap()) {
            Ok(i) => return (self.left_limit[i], self.right_limit[i]),
            Err(i) => i - 1,
        };
        let u = (s - st[i]) / (st[i + 1] - st[i]);
        (
            self.left_limit[i] + u * (self.left_limit[i + 1] - self.left_limit[i]),
            self.right_limit[i] + u * (self.right_limit[i + 1] - self.right_limit[i]),
        )
    }

    /// Signed margin of a reference point: positive inside the limits,
    /// negative by the amount of violation.
    pub fn margin(&self, p: &Vec2) -> f64 {
        let f = project_to_path(&self.reference, p, 0.0).expect("corridor reference is valid");
        let (l, r) = self.limits_at(f.s);
        (l - f.d).min(f.d - r)
    }

    /// Signed margin of the whole footprint against the raw (uninflated)
    /// bounds: every corner is tested at its own station.
    pub fn footprint_margin(&self, pose: &Pose2D, fp: &Footprint) -> f64 {
        fp.corners(pose)
            .iter()
            .map(|c| {
                let f = project_to_path(&self.reference, c, 0.0).expect("corridor reference is valid");
                let (l, r) = self.limits_at(f.s);
                (l + self.inflation - f.d).min(f.d - (r - self.inflation))
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn footprint_inside(&self, pose: &Pose2D, fp: &Footprint) -> bool {
        self.footprint_margin(pose, fp) >= -1e-6
    }

    /// Copy with static obstacles cut out: at every station whose vehicle
    /// body could overlap an obstacle, the side with more free space is kept.
    /// Fully blocked stations collapse to zero width.
    pub fn carve(&self, obstacles: &[ConvexPolygon], fp: &Footprint, clearance: f64) -> DrivableCorridor {
        let mut out = self.clone();
        let hw = 0.5 * fp.width;
        for obs in obstacles {
            let fr: Vec<_> = obs
                .vertices()
                .iter()
                .filter_map(|v| project_to_path(&self.reference, v, 0.0).ok())
                .collect();
            let smin = fr.iter().map(|f| f.s).fold(f64::INFINITY, f64::min);
            let smax = fr.iter().map(|f| f.s).fold(f64::NEG_INFINITY, f64::max);
            let dmin = fr.iter().map(|f| f.d).fold(f64::INFINITY, f64::min);
            let dmax = fr.iter().map(|f| f.d).fold(f64::NEG_INFINITY, f64::max);
            if smax <= 0.0 || smin >= self.reference.length() {
                continue;
            }
            let lo = smin - fp.front_overhang() - clearance;
            let hi = smax + fp.length + clearance;
            for i in 0..out.stations.len() {
                let s = out.stations[i];
                if s < lo || s > hi {
                    continue;
                }
                let (l, r) = (out.left_limit[i], out.right_limit[i]);
                if dmin > l + hw || dmax < r - hw {
                    // obstacle lies entirely outside the lane band
                    continue;
                }
                let pass_left = dmax + hw + clearance;
                let pass_right = dmin - hw - clearance;
                if l - pass_left >= pass_right - r {
                    out.right_limit[i] = pass_left.clamp(r, l);
                } else {
                    out.left_limit[i] = pass_right.clamp(r, l);
                }
            }
        }
        out
    }
}

/// Corridor along the route centerline with limits inflated by half the
/// footprint width.
pub fn corridor_along(graph: &LaneGraph, route: &Route, fp: &Footprint) -> Result<DrivableCorridor> {
    let lanes = check_route(graph, route)?;
    let reference = route_centerline(graph, route)?;
    let left = concat(lanes.iter().map(|l| (l.id.as_str(), &l.left_bound)).collect())?;
    let right = concat(lanes.iter().map(|l| (l.id.as_str(), &l.right_bound)).collect())?;
    let hw = 0.5 * fp.width;
    let mut stations = Vec::with_capacity(reference.len());
    let mut left_limit = Vec::with_capacity(reference.len());
    let mut right_limit = Vec::with_capacity(reference.len());
    for (v, &s) in reference.vertices().iter().zip(reference.arc_lengths()) {
        let h = reference.smooth_heading_at(s);
        let l = lateral_to_bound(&left, v, h, 1.0) - hw;
        let r = lateral_to_bound(&right, v, h, -1.0) + hw;
        if l - r <= 0.0 {
            return Err(LaneError::ImpassableCorridor(s));
        }
        stations.push(s);
        left_limit.push(l);
        right_limit.push(r);
    }
    Ok(DrivableCorridor {
        reference,
        stations,
        left_limit,
        right_limit,
        inflation: hw,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn straight_lane(id: &str, x0: f64, len: f64, half_width: f64, succ: &[&str]) -> Lane {
        let line = |y: f64| {
            Polyline::new(vec![Vec2::new(x0, y), Vec2::new(x0 + len, y)]).unwrap()
        };
        Lane {
            id: id.to_string(),
            centerline: line(0.0),
            left_bound: line(half_width),
            right_bound: line(-half_width),
            speed_limit: 8.0,
            successors: succ.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn single_lane_route() {
        let g = LaneGraph::new(vec![straight_lane("a", 0.0, 30.0, 2.0, &[])]).unwrap();
        let r = shortest_route(&g, "a", "a").unwrap();
        assert_eq!(r.lane_ids, vec!["a"]);
        assert!((r.total_length - 30.0).abs() < 1e-12);
        let c = route_centerline(&g, &r).unwrap();
        assert_eq!(c.len(), 61);
    }

    #[test]
    fn two_lane_centerline_is_additive() {
        let g = LaneGraph::new(vec![
            straight_lane("a", 0.0, 30.0, 2.0, &["b"]),
            straight_lane("b", 30.0, 30.0, 2.0, &[]),
        ])
        .unwrap();
        let r = shortest_route(&g, "a", "b").unwrap();
        let c = route_centerline(&g, &r).unwrap();
        assert!((c.length() - 60.0).abs() <= 0.5);
    }

    #[test]
    fn unreachable_goal() {
        let g = LaneGraph::new(vec![
            straight_lane("a", 0.0, 30.0, 2.0, &[]),
            straight_lane("b", 100.0, 30.0, 2.0, &[]),
        ])
        .unwrap();
        assert_eq!(shortest_route(&g, "a", "b").unwrap_err(), LaneError::NoRoute);
        assert!(matches!(shortest_route(&g, "a", "zz"), Err(LaneError::UnknownLane(_))));
    }

    #[test]
    fn graph_validation() {
        let err = LaneGraph::new(vec![straight_lane("a", 0.0, 30.0, 2.0, &["ghost"])]).unwrap_err();
        assert!(err.to_string().contains("ghost"));
        let err = LaneGraph::new(vec![straight_lane("a", 0.0, 30.0, 2.0, &["a"])]).unwrap_err();
        assert_eq!(err, LaneError::SelfLoop("a".into()));
        let mut bad = straight_lane("a", 0.0, 30.0, 2.0, &[]);
        std::mem::swap(&mut bad.left_bound, &mut bad.right_bound);
        assert!(matches!(LaneGraph::new(vec![bad]), Err(LaneError::InconsistentBounds(_))));
    }

    #[test]
    fn discontinuous_route_rejected() {
        let g = LaneGraph::new(vec![
            straight_lane("a", 0.0, 30.0, 2.0, &["b"]),
            straight_lane("b", 31.0, 30.0, 2.0, &[]),
        ])
        .unwrap();
        let r = shortest_route(&g, "a", "b").unwrap();
        assert!(matches!(
            route_centerline(&g, &r),
            Err(LaneError::DiscontinuousRoute { .. })
        ));
    }

    #[test]
    fn symmetric_corridor() {
        let g = LaneGraph::new(vec![straight_lane("a", 0.0, 30.0, 2.0, &[])]).unwrap();
        let r = shortest_route(&g, "a", "a").unwrap();
        let fp = Footprint { width: 2.0, ..Footprint::default() };
        let c = corridor_along(&g, &r, &fp).unwrap();
        for (l, r) in c.left_limit.iter().zip(&c.right_limit) {
            assert!((l - 1.0).abs() < 1e-12 && (r + 1.0).abs() < 1e-12);
        }
        let wide = Footprint { width: 4.0, ..fp };
        assert!(matches!(corridor_along(&g, &r, &wide), Err(LaneError::ImpassableCorridor(_))));
    }

    #[test]
    fn bound_step_shows_in_right_limit() {
        let mut lane = straight_lane("a", 0.0, 40.0, 2.0, &[]);
        lane.right_bound = Polyline::new(vec![
            Vec2::new(0.0, -2.0),
            Vec2::new(20.0, -2.0),
            Vec2::new(20.0, -1.5),
            Vec2::new(40.0, -1.5),
        ])
        .unwrap();
        let g = LaneGraph::new(vec![lane]).unwrap();
        let r = shortest_route(&g, "a", "a").unwrap();
        let fp = Footprint { width: 2.0, ..Footprint::default() };
        let c = corridor_along(&g, &r, &fp).unwrap();
        for (s, rl) in c.stations.iter().zip(&c.right_limit) {
            let expect = if *s < 20.0 { -1.0 } else { -0.5 };
            assert!((rl - expect).abs() < 1e-9, "s={s} right={rl}");
        }
    }

    #[test]
    fn carve_passes_on_freer_side() {
        let g = LaneGraph::new(vec![straight_lane("a", 0.0, 60.0, 3.0, &[])]).unwrap();
        let r = shortest_route(&g, "a", "a").unwrap();
        let fp = Footprint::default();
        let c = corridor_along(&g, &r, &fp).unwrap();
        let obs = ConvexPolygon::new(vec![
            Vec2::new(30.0, -3.0),
            Vec2::new(34.0, -3.0),
            Vec2::new(34.0, -0.5),
            Vec2::new(30.0, -0.5),
        ])
        .unwrap();
        let carved = c.carve(&[obs], &fp, 0.2);
        let (l, rr) = carved.limits_at(32.0);
        assert!((rr - (-0.5 + 0.9 + 0.2)).abs() < 1e-9, "{rr}");
        assert!((l - 2.1).abs() < 1e-9);
        assert_eq!(carved.limits_at(5.0), c.limits_at(5.0));
    }
}
