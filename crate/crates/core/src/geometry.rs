//! Planar geometry shared by every stage of the stack: poses, trajectories,
//! polylines, Frenet projection and footprint collision tests.
//!
//! Lateral sign convention: `d > 0` is to the left of the path tangent.

use std::f64::consts::PI;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;

/// Default trajectory spacing in seconds.
pub const DEFAULT_DT: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate path")]
    DegeneratePath,
    #[error("duplicate vertices at index {0}")]
    DuplicateVertices(usize),
    #[error("arc length {s} outside path [0, {length}]")]
    OutOfRange { s: f64, length: f64 },
    #[error("non-convex obstacle")]
    NonConvexObstacle,
    #[error("invalid resampling step {0}")]
    InvalidStep(f64),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid footprint: {0}")]
    InvalidFootprint(String),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Shortest-arc interpolation between two headings.
pub fn lerp_angle(a: f64, b: f64, u: f64) -> f64 {
    normalize_angle(a + normalize_angle(b - a) * u)
}

pub fn heading_vec(heading: f64) -> Vec2 {
    Vec2::new(heading.cos(), heading.sin())
}

/// z-component of the planar cross product.
pub fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Expresses a world point in this pose's frame.
    pub fn to_local(&self, p: &Vec2) -> Vec2 {
        let (s, c) = self.heading.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Vec2::new(c * dx + s * dy, -s * dx + c * dy)
    }

    /// Maps a point given in this pose's frame back to the world.
    pub fn to_world(&self, p: &Vec2) -> Vec2 {
        let (s, c) = self.heading.sin_cos();
        Vec2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    pub fn relative_to(&self, origin: &Pose2D) -> Pose2D {
        let p = origin.to_local(&self.position());
        Pose2D::new(p.x, p.y, self.heading - origin.heading)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgoState {
    pub pose: Pose2D,
    pub vel_lon: f64,
    pub vel_lat: f64,
    pub vel_ang: f64,
    pub acc_lon: f64,
    pub acc_lat: f64,
    pub acc_ang: f64,
    pub timestamp: f64,
}

impl EgoState {
    pub fn at_rest(pose: Pose2D, timestamp: f64) -> Self {
        Self {
            pose,
            vel_lon: 0.0,
            vel_lat: 0.0,
            vel_ang: 0.0,
            acc_lon: 0.0,
            acc_lat: 0.0,
            acc_ang: 0.0,
            timestamp,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.pose.x,
            self.pose.y,
            self.pose.heading,
            self.vel_lon,
            self.vel_lat,
            self.vel_ang,
            self.acc_lon,
            self.acc_lat,
            self.acc_ang,
            self.timestamp,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub pose: Pose2D,
    pub t: f64,
    pub speed: f64,
    pub accel: f64,
    pub curvature: f64,
}

/// Uniformly timed sequence of states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    points: Vec<TrajectoryPoint>,
    dt: f64,
}

impl Trajectory {
    pub fn new(points: Vec<TrajectoryPoint>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(GeometryError::InvalidTrajectory(format!("dt {dt}")));
        }
        if points.len() < 2 {
            return Err(GeometryError::InvalidTrajectory(
                "fewer than 2 points".into(),
            ));
        }
        for (i, w) in points.windows(2).enumerate() {
            let step = w[1].t - w[0].t;
            if (step - dt).abs() > 1e-9 {
                return Err(GeometryError::InvalidTrajectory(format!(
                    "non-uniform spacing at {i}: {step}"
                )));
            }
        }
        if let Some(p) = points.iter().find(|p| p.speed < 0.0) {
            return Err(GeometryError::InvalidTrajectory(format!(
                "negative speed {} at t={}",
                p.speed, p.t
            )));
        }
        Ok(Self { points, dt })
    }

    /// Builds a trajectory from timed positions only; heading, speed,
    /// acceleration and curvature come from finite differences.
    pub fn from_positions(positions: &[Vec2], t0: f64, dt: f64, start_heading: f64) -> Result<Self> {
        let n = positions.len();
        if n < 2 {
            return Err(GeometryError::InvalidTrajectory(
                "fewer than 2 points".into(),
            ));
        }
        let mut headings = Vec::with_capacity(n);
        let mut last = start_heading;
        for i in 0..n {
            let d = if i + 1 < n {
                positions[i + 1] - positions[i]
            } else {
                positions[i] - positions[i - 1]
            };
            if d.norm() > 1e-3 {
                last = d.y.atan2(d.x);
            }
            headings.push(last);
        }
        let speeds: Vec<f64> = (0..n)
            .map(|i| {
                let (a, b, span) = if i == 0 {
                    (0, 1, dt)
                } else if i + 1 == n {
                    (n - 2, n - 1, dt)
                } else {
                    (i - 1, i + 1, 2.0 * dt)
                };
                (positions[b] - positions[a]).norm() / span
            })
            .collect();
        let points = (0..n)
            .map(|i| {
                let accel = if i + 1 < n {
                    (speeds[i + 1] - speeds[i]) / dt
                } else {
                    (speeds[i] - speeds[i - 1]) / dt
                };
                let curvature = if i > 0 && i + 1 < n {
                    circumscribed_curvature(&positions[i - 1], &positions[i], &positions[i + 1])
                        .unwrap_or(0.0)
                } else {
                    0.0
                };
                TrajectoryPoint {
                    pose: Pose2D::new(positions[i].x, positions[i].y, headings[i]),
                    t: t0 + i as f64 * dt,
                    speed: speeds[i],
                    accel,
                    curvature,
                }
            })
            .collect();
        Self::new(points, dt)
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.points.last().unwrap().t - self.points[0].t
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.points.iter().map(|p| p.pose.position()).collect()
    }

    /// State at time `t` (relative to the same origin as the point times),
    /// clamped to the trajectory span.
    pub fn sample(&self, t: f64) -> TrajectoryPoint {
        let first = &self.points[0];
        if t <= first.t {
            return *first;
        }
        let last = self.points.last().unwrap();
        if t >= last.t {
            return *last;
        }
        let f = (t - first.t) / self.dt;
        let i = (f.floor() as usize).min(self.points.len() - 2);
        let u = f - i as f64;
        interpolate_point(&self.points[i], &self.points[i + 1], u)
    }

    /// Arc length traversed between the first and last point.
    pub fn path_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].pose.position() - w[0].pose.position()).norm())
            .sum()
    }
}

fn interpolate_point(a: &TrajectoryPoint, b: &TrajectoryPoint, u: f64) -> TrajectoryPoint {
    let lerp = |x: f64, y: f64| x + (y - x) * u;
    TrajectoryPoint {
        pose: Pose2D::new(
            lerp(a.pose.x, b.pose.x),
            lerp(a.pose.y, b.pose.y),
            lerp_angle(a.pose.heading, b.pose.heading, u),
        ),
        t: lerp(a.t, b.t),
        speed: lerp(a.speed, b.speed),
        accel: lerp(a.accel, b.accel),
        curvature: lerp(a.curvature, b.curvature),
    }
}

/// Polyline with cached cumulative arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    vertices: Vec<Vec2>,
    arc: Vec<f64>,
}

impl Polyline {
    pub fn new(vertices: Vec<Vec2>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(GeometryError::DegeneratePath);
        }
        let mut arc = Vec::with_capacity(vertices.len());
        arc.push(0.0);
        for (i, w) in vertices.windows(2).enumerate() {
            let seg = (w[1] - w[0]).norm();
            if !(seg > 0.0) {
                return Err(GeometryError::DuplicateVertices(i + 1));
            }
            arc.push(arc[i] + seg);
        }
        Ok(Self { vertices, arc })
    }

    /// Like [`Polyline::new`] but silently drops vertices closer than `tol`
    /// to their predecessor.
    pub fn new_dedup(vertices: Vec<Vec2>, tol: f64) -> Result<Self> {
        let mut kept: Vec<Vec2> = Vec::with_capacity(vertices.len());
        for v in vertices {
            match kept.last() {
                Some(last) if (v - last).norm() <= tol => {}
                _ => kept.push(v),
            }
        }
        Self::new(kept)
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn arc_lengths(&self) -> &[f64] {
        &self.arc
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    fn segment_at(&self, s: f64) -> usize {
        match self.arc.binary_search_by(|a| a.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.vertices.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.vertices.len() - 2),
        }
    }

    pub fn segment_heading(&self, i: usize) -> f64 {
        let d = self.vertices[i + 1] - self.vertices[i];
        d.y.atan2(d.x)
    }

    /// Position and tangent heading at arc length `s`, clamped to the ends.
    pub fn point_at(&self, s: f64) -> (Vec2, f64) {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let seg = self.arc[i + 1] - self.arc[i];
        let u = (s - self.arc[i]) / seg;
        let p = self.vertices[i] + (self.vertices[i + 1] - self.vertices[i]) * u;
        (p, self.segment_heading(i))
    }

    /// Position at arc length `s`, extending the end segments linearly when
    /// `s` lies outside `[0, length]`.
    pub fn point_at_extended(&self, s: f64) -> Vec2 {
        if s < 0.0 {
            let h = self.segment_heading(0);
            self.vertices[0] + heading_vec(h) * s
        } else if s > self.length() {
            let h = self.segment_heading(self.vertices.len() - 2);
            *self.vertices.last().unwrap() + heading_vec(h) * (s - self.length())
        } else {
            self.point_at(s).0
        }
    }

    /// Vertex-averaged tangent heading, continuous along the path.
    pub fn smooth_heading_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let h = self.segment_heading(i);
        let mid = 0.5 * (self.arc[i] + self.arc[i + 1]);
        if s < mid && i > 0 {
            let prev = self.segment_heading(i - 1);
            let u = 0.5 + (s - self.arc[i]) / (self.arc[i + 1] - self.arc[i]);
            lerp_angle(prev, h, u.clamp(0.5, 1.0))
        } else if s >= mid && i + 2 < self.vertices.len() {
            let next = self.segment_heading(i + 1);
            let u = (s - mid) / (self.arc[i + 1] - self.arc[i]);
            lerp_angle(h, next, u.clamp(0.0, 0.5))
        } else {
            h
        }
    }

    /// Concatenates the sub-path between two arc lengths into a new polyline.
    pub fn slice(&self, s0: f64, s1: f64) -> Result<Polyline> {
        let s0 = s0.clamp(0.0, self.length());
        let s1 = s1.clamp(0.0, self.length());
        let mut pts = vec![self.point_at(s0).0];
        for (v, &a) in self.vertices.iter().zip(&self.arc) {
            if a > s0 && a < s1 {
                pts.push(*v);
            }
        }
        pts.push(self.point_at(s1).0);
        Polyline::new_dedup(pts, 1e-9)
    }

    /// Offsets the path laterally by `d` (left positive) using segment normals
    /// at the vertices' smooth headings.
    pub fn offset(&self, d: f64) -> Result<Polyline> {
        let pts = self
            .vertices
            .iter()
            .zip(&self.arc)
            .map(|(v, &s)| {
                let h = self.smooth_heading_at(s);
                v + Vec2::new(-h.sin(), h.cos()) * d
            })
            .collect();
        Polyline::new_dedup(pts, 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetCoord {
    pub s: f64,
    pub d: f64,
    pub heading_err: f64,
}

/// Nearest-point projection of a pose onto a path.
pub fn project_to_path(path: &Polyline, point: &Vec2, heading: f64) -> Result<FrenetCoord> {
    let v = path.vertices();
    if v.len() < 2 {
        return Err(GeometryError::DegeneratePath);
    }
    let mut best = (f64::INFINITY, 0usize, 0.0f64);
    for i in 0..v.len() - 1 {
        let seg = v[i + 1] - v[i];
        let len2 = seg.norm_squared();
        let u = ((point - v[i]).dot(&seg) / len2).clamp(0.0, 1.0);
        let q = v[i] + seg * u;
        let dist2 = (point - q).norm_squared();
        if dist2 < best.0 {
            best = (dist2, i, u);
        }
    }
    let (dist2, i, u) = best;
    let arc = path.arc_lengths();
    let s = arc[i] + u * (arc[i + 1] - arc[i]);
    let seg = v[i + 1] - v[i];
    let q = v[i] + seg * u;
    let side = cross(&seg, &(point - q));
    let d = if side >= 0.0 { dist2.sqrt() } else { -dist2.sqrt() };
    let tangent = path.segment_heading(i);
    Ok(FrenetCoord {
        s,
        d,
        heading_err: normalize_angle(heading - tangent),
    })
}

/// Inverse of [`project_to_path`] on the segment containing `fr.s`.
pub fn frenet_to_cartesian(path: &Polyline, fr: &FrenetCoord) -> Result<Pose2D> {
    if !(fr.s >= 0.0 && fr.s <= path.length()) {
        return Err(GeometryError::OutOfRange {
            s: fr.s,
            length: path.length(),
        });
    }
    let (p, h) = path.point_at(fr.s);
    let n = Vec2::new(-h.sin(), h.cos());
    let q = p + n * fr.d;
    Ok(Pose2D::new(q.x, q.y, h + fr.heading_err))
}

/// Rectangular vehicle footprint referenced at the rear axle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
    pub rear_axle_to_rear: f64,
    pub wheelbase: f64,
}

impl Default for Footprint {
    fn default() -> Self {
        Self {
            length: 4.5,
            width: 1.8,
            rear_axle_to_rear: 0.9,
            wheelbase: 2.7,
        }
    }
}

impl Footprint {
    pub fn new(length: f64, width: f64, rear_axle_to_rear: f64, wheelbase: f64) -> Result<Self> {
        let fp = Self {
            length,
            width,
            rear_axle_to_rear,
            wheelbase,
        };
        fp.validate()?;
        Ok(fp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0 && self.rear_axle_to_rear > 0.0 && self.wheelbase > 0.0) {
            return Err(GeometryError::InvalidFootprint("dimensions must be positive".into()));
        }
        if self.rear_axle_to_rear >= self.length {
            return Err(GeometryError::InvalidFootprint(
                "rear overhang exceeds length".into(),
            ));
        }
        Ok(())
    }

    /// Distance from the rear axle to the front bumper.
    pub fn front_overhang(&self) -> f64 {
        self.length - self.rear_axle_to_rear
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self, pose: &Pose2D) -> [Vec2; 4] {
        let hw = 0.5 * self.width;
        let front = self.front_overhang();
        let rear = -self.rear_axle_to_rear;
        [
            pose.to_world(&Vec2::new(rear, -hw)),
            pose.to_world(&Vec2::new(front, -hw)),
            pose.to_world(&Vec2::new(front, hw)),
            pose.to_world(&Vec2::new(rear, hw)),
        ]
    }

    /// Center of the rectangle.
    pub fn center(&self, pose: &Pose2D) -> Vec2 {
        pose.to_world(&Vec2::new(0.5 * self.length - self.rear_axle_to_rear, 0.0))
    }
}

/// Convex polygon with at least three vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec2>", into = "Vec<Vec2>")]
pub struct ConvexPolygon {
    vertices: Vec<Vec2>,
}

impl TryFrom<Vec<Vec2>> for ConvexPolygon {
    type Error = GeometryError;

    fn try_from(v: Vec<Vec2>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ConvexPolygon> for Vec<Vec2> {
    fn from(p: ConvexPolygon) -> Self {
        p.vertices
    }
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Vec2>) -> Result<Self> {
        check_convex(&vertices)?;
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn centroid(&self) -> Vec2 {
        self.vertices.iter().fold(Vec2::zeros(), |a, v| a + v) / self.vertices.len() as f64
    }

    pub fn translated(&self, by: &Vec2) -> ConvexPolygon {
        ConvexPolygon {
            vertices: self.vertices.iter().map(|v| v + by).collect(),
        }
    }

    pub fn transformed(&self, pose: &Pose2D) -> ConvexPolygon {
        ConvexPolygon {
            vertices: self.vertices.iter().map(|v| pose.to_world(v)).collect(),
        }
    }

    pub fn intersects(&self, other: &ConvexPolygon) -> bool {
        polygons_intersect(&self.vertices, &other.vertices)
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        let n = self.vertices.len();
        let mut sign = 0.0f64;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = cross(&(b - a), &(p - a));
            if c != 0.0 {
                if sign == 0.0 {
                    sign = c.signum();
                } else if c.signum() != sign {
                    return false;
                }
            }
        }
        true
    }
}

fn check_convex(v: &[Vec2]) -> Result<()> {
    let n = v.len();
    if n < 3 {
        return Err(GeometryError::NonConvexObstacle);
    }
    let mut sign = 0.0f64;
    let mut turning = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        let c = v[(i + 2) % n];
        let e1 = b - a;
        let e2 = c - b;
        if e1.norm() == 0.0 {
            return Err(GeometryError::NonConvexObstacle);
        }
        let z = cross(&e1, &e2);
        if z.abs() > 1e-12 {
            if sign == 0.0 {
                sign = z.signum();
            } else if z.signum() != sign {
                return Err(GeometryError::NonConvexObstacle);
            }
        }
        turning += normalize_angle(e2.y.atan2(e2.x) - e1.y.atan2(e1.x));
    }
    // rejects self-intersecting stars whose turns all share a sign
    if sign == 0.0 || (turning.abs() - 2.0 * PI).abs() > 1e-6 {
        return Err(GeometryError::NonConvexObstacle);
    }
    Ok(())
}

fn project_onto(axis: &Vec2, pts: &[Vec2]) -> (f64, f64) {
    pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = axis.dot(p);
        (lo.min(d), hi.max(d))
    })
}

/// Separating-axis test; touching shapes count as intersecting.
fn polygons_intersect(a: &[Vec2], b: &[Vec2]) -> bool {
    for poly in [a, b] {
        let n = poly.len();
        for i in 0..n {
            let e = poly[(i + 1) % n] - poly[i];
            let axis = Vec2::new(-e.y, e.x);
            let (amin, amax) = project_onto(&axis, a);
            let (bmin, bmax) = project_onto(&axis, b);
            if amax < bmin || bmax < amin {
                return false;
            }
        }
    }
    true
}

/// True iff the footprint rectangle at `pose` intersects any obstacle.
pub fn footprint_collides(pose: &Pose2D, fp: &Footprint, obstacles: &[ConvexPolygon]) -> bool {
    let rect = fp.corners(pose);
    obstacles.iter().any(|o| polygons_intersect(&rect, o.vertices()))
}

/// Like [`footprint_collides`] but validates raw vertex lists first.
pub fn footprint_collides_checked(
    pose: &Pose2D,
    fp: &Footprint,
    obstacles: &[Vec<Vec2>],
) -> Result<bool> {
    for o in obstacles {
        check_convex(o)?;
    }
    let rect = fp.corners(pose);
    Ok(obstacles.iter().any(|o| polygons_intersect(&rect, o)))
}

/// Signed curvature of the circle through three points (left turn positive).
pub fn circumscribed_curvature(a: &Vec2, b: &Vec2, c: &Vec2) -> Option<f64> {
    let ab = (b - a).norm();
    let bc = (c - b).norm();
    let ca = (a - c).norm();
    let denom = ab * bc * ca;
    if denom <= 0.0 {
        return None;
    }
    Some(2.0 * cross(&(b - a), &(c - b)) / denom)
}

/// Per-vertex curvature by circumscribed circles; endpoints copy their
/// neighbor.
pub fn curvature_profile(path: &Polyline) -> Result<Vec<f64>> {
    let v = path.vertices();
    if v.len() < 3 {
        return Err(GeometryError::DegeneratePath);
    }
    let mut k = Vec::with_capacity(v.len());
    k.push(0.0);
    for i in 1..v.len() - 1 {
        let c = circumscribed_curvature(&v[i - 1], &v[i], &v[i + 1])
            .ok_or(GeometryError::DuplicateVertices(i))?;
        k.push(c);
    }
    k.push(k[v.len() - 2]);
    k[0] = k[1];
    Ok(k)
}

/// Resamples a polyline at uniform arc-length `step`; the end vertex is kept
/// even if the last interval is shorter.
pub fn resample_polyline(path: &Polyline, step: f64) -> Result<Polyline> {
    if !(step > 0.0) || step > path.length() + 1e-12 {
        return Err(GeometryError::InvalidStep(step));
    }
    let len = path.length();
    let n = (len / step + 1e-9).floor() as usize;
    let mut pts: Vec<Vec2> = (0..=n).map(|i| path.point_at(i as f64 * step).0).collect();
    let end = *path.vertices().last().unwrap();
    if len - n as f64 * step > 1e-9 * len.max(1.0) {
        pts.push(end);
    } else {
        *pts.last_mut().unwrap() = end;
    }
    Polyline::new(pts)
}

/// Resamples a trajectory at a uniform time `step`. The span must be an
/// integral number of steps so that both endpoints are preserved.
pub fn resample_trajectory(traj: &Trajectory, step: f64) -> Result<Trajectory> {
    let span = traj.duration();
    if !(step > 0.0) || step > span + 1e-12 {
        return Err(GeometryError::InvalidStep(step));
    }
    let ratio = span / step;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-6 {
        return Err(GeometryError::InvalidStep(step));
    }
    let t0 = traj.points()[0].t;
    let n = n as usize;
    let mut pts: Vec<TrajectoryPoint> = (0..=n)
        .map(|i| {
            let mut p = traj.sample(t0 + i as f64 * step);
            p.t = t0 + i as f64 * step;
            p
        })
        .collect();
    let last = *traj.points().last().unwrap();
    let t_last = pts[n].t;
    pts[n] = TrajectoryPoint { t: t_last, ..last };
    Trajectory::new(pts, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn straight(len: f64) -> Polyline {
        Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(len, 0.0)]).unwrap()
    }

    fn circle_arc(r: f64, n: usize, sweep: f64) -> Polyline {
        let pts = (0..=n)
            .map(|i| {
                let a = -PI / 2.0 + sweep * i as f64 / n as f64;
                Vec2::new(r * a.cos(), r + r * a.sin())
            })
            .collect();
        Polyline::new(pts).unwrap()
    }

    #[test]
    fn heading_normalization_range() {
        for a in [-10.0, -PI, -1.0, 0.0, PI, 3.5, 100.0] {
            let h = Pose2D::new(0.0, 0.0, a).heading;
            assert!(h > -PI && h <= PI, "{a} -> {h}");
        }
        assert_eq!(normalize_angle(-PI), PI);
    }

    #[test]
    fn projection_axis_aligned() {
        let f = project_to_path(&straight(10.0), &Vec2::new(5.0, 2.0), 0.0).unwrap();
        assert_abs_diff_eq!(f.s, 5.0);
        assert_abs_diff_eq!(f.d, 2.0);
        assert_abs_diff_eq!(f.heading_err, 0.0);
        let f = project_to_path(&straight(10.0), &Vec2::new(0.0, 0.0), 0.0).unwrap();
        assert_eq!((f.s, f.d, f.heading_err), (0.0, 0.0, 0.0));
        let f = project_to_path(&straight(10.0), &Vec2::new(3.0, -1.5), 0.0).unwrap();
        assert_abs_diff_eq!(f.d, -1.5);
    }

    #[test]
    fn degenerate_path_rejected() {
        assert_eq!(
            Polyline::new(vec![Vec2::new(0.0, 0.0)]).unwrap_err(),
            GeometryError::DegeneratePath
        );
        assert!(Polyline::new(vec![Vec2::new(1.0, 0.0), Vec2::new(1.0, 0.0)]).is_err());
    }

    #[test]
    fn frenet_to_cartesian_examples() {
        let p = straight(10.0);
        let q = frenet_to_cartesian(&p, &FrenetCoord { s: 3.0, d: 0.0, heading_err: 0.0 }).unwrap();
        assert_eq!((q.x, q.y, q.heading), (3.0, 0.0, 0.0));
        let q = frenet_to_cartesian(&p, &FrenetCoord { s: 3.0, d: 1.0, heading_err: 0.0 }).unwrap();
        assert_eq!((q.x, q.y), (3.0, 1.0));
        assert!(frenet_to_cartesian(&p, &FrenetCoord { s: 11.0, d: 0.0, heading_err: 0.0 }).is_err());
    }

    #[test]
    fn resample_counts_and_idempotence() {
        let r = resample_polyline(&straight(10.0), 1.0).unwrap();
        assert_eq!(r.len(), 11);
        let again = resample_polyline(&r, 1.0).unwrap();
        for (a, b) in r.vertices().iter().zip(again.vertices()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(resample_polyline(&straight(10.0), 11.0).is_err());
        assert!(resample_polyline(&straight(10.0), 0.0).is_err());
    }

    #[test]
    fn resampled_circle_curvature() {
        let fine = circle_arc(20.0, 4000, PI / 2.0);
        let r = resample_polyline(&fine, 0.5).unwrap();
        let k = curvature_profile(&r).unwrap();
        // the short closing interval is excluded
        for c in &k[..k.len() - 2] {
            assert!((c - 0.05).abs() < 0.05 * 0.01, "{c}");
        }
    }

    #[test]
    fn curvature_conventions() {
        let line = Polyline::new((0..5).map(|i| Vec2::new(i as f64, 0.0)).collect()).unwrap();
        assert!(curvature_profile(&line).unwrap().iter().all(|&k| k == 0.0));
        let left = circle_arc(20.0, 100, 1.0);
        assert!(curvature_profile(&left).unwrap().iter().all(|&k| k > 0.0));
        let right: Vec<Vec2> = left.vertices().iter().map(|v| Vec2::new(v.x, -v.y)).collect();
        let right = Polyline::new(right).unwrap();
        assert!(curvature_profile(&right).unwrap().iter().all(|&k| k < 0.0));
        assert!(curvature_profile(&straight(1.0)).is_err());
    }

    #[test]
    fn collision_basic_cases() {
        let fp = Footprint::default();
        let far = ConvexPolygon::new(vec![
            Vec2::new(100.0, 0.0),
            Vec2::new(101.0, 0.0),
            Vec2::new(101.0, 1.0),
        ])
        .unwrap();
        let pose = Pose2D::new(0.0, 0.0, 0.3);
        assert!(!footprint_collides(&pose, &fp, &[far.clone()]));
        let around = ConvexPolygon::new(vec![
            Vec2::new(-0.1, -0.1),
            Vec2::new(0.1, -0.1),
            Vec2::new(0.1, 0.1),
            Vec2::new(-0.1, 0.1),
        ])
        .unwrap();
        assert!(footprint_collides(&pose, &fp, &[far, around]));
    }

    #[test]
    fn non_convex_rejected() {
        let dart = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(2.0, 1.0),
            Vec2::new(0.0, 2.0),
            Vec2::new(0.5, 1.0),
        ];
        assert_eq!(
            footprint_collides_checked(&Pose2D::new(0.0, 0.0, 0.0), &Footprint::default(), &[dart]),
            Err(GeometryError::NonConvexObstacle)
        );
        // clockwise convex polygons are fine
        let cw = vec![Vec2::new(0.0, 0.0), Vec2::new(0.0, 1.0), Vec2::new(1.0, 0.0)];
        assert!(ConvexPolygon::new(cw).is_ok());
    }

    #[test]
    fn footprint_validation() {
        assert!(Footprint::new(4.0, 2.0, 4.5, 2.5).is_err());
        assert!(Footprint::new(4.0, -2.0, 1.0, 2.5).is_err());
        assert!(Footprint::new(4.0, 2.0, 1.0, 2.5).is_ok());
    }

    #[test]
    fn trajectory_invariants() {
        let mk = |t: f64| TrajectoryPoint {
            pose: Pose2D::new(t, 0.0, 0.0),
            t,
            speed: 1.0,
            accel: 0.0,
            curvature: 0.0,
        };
        assert!(Trajectory::new(vec![mk(0.0)], 0.1).is_err());
        assert!(Trajectory::new(vec![mk(0.0), mk(0.1), mk(0.3)], 0.1).is_err());
        let t = Trajectory::new((0..11).map(|i| mk(i as f64 * 0.1)).collect(), 0.1).unwrap();
        let r = resample_trajectory(&t, 0.2).unwrap();
        assert_eq!(r.len(), 6);
        assert_abs_diff_eq!(r.points()[5].pose.x, 1.0, epsilon = 1e-12);
        assert!(resample_trajectory(&t, 0.3).is_err());
        assert!(resample_trajectory(&t, 2.0).is_err());
    }

    #[test]
    fn trajectory_heading_interpolation_takes_short_arc() {
        let a = TrajectoryPoint {
            pose: Pose2D::new(0.0, 0.0, 3.0),
            t: 0.0,
            speed: 0.0,
            accel: 0.0,
            curvature: 0.0,
        };
        let b = TrajectoryPoint {
            pose: Pose2D::new(0.0, 0.0, -3.0),
            t: 0.1,
            ..a
        };
        let t = Trajectory::new(vec![a, b], 0.1).unwrap();
        let mid = t.sample(0.05).pose.heading;
        assert!(mid.abs() > 3.0, "{mid}");
    }
}
