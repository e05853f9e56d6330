#![allow(dead_code)]

use hybrid_planner::geometry::{Polyline, Pose2D, Vec2};
use hybrid_planner::lane::Lane;

/// Constant-curvature lane starting at `start`; returns the lane and its end pose.
/// `hw` holds the left and right half widths.
pub fn arc_lane(id: &str, start: Pose2D, len: f64, kappa: f64, hw: (f64, f64), succ: &[&str]) -> (Lane, Pose2D) {
    let n = (len / 0.25).ceil() as usize;
    let pose_at = |s: f64| arc_pose(&start, kappa, s);
    let line = |d: f64| {
        Polyline::new(
            (0..=n)
                .map(|i| {
                    let p = pose_at(len * i as f64 / n as f64);
                    Vec2::new(p.x - d * p.heading.sin(), p.y + d * p.heading.cos())
                })
                .collect(),
        )
        .unwrap()
    };
    let lane = Lane {
        id: id.into(),
        centerline: line(0.0),
        left_bound: line(hw.0),
        right_bound: line(-hw.1),
        speed_limit: 8.0,
        successors: succ.iter().map(|s| s.to_string()).collect(),
    };
    (lane, pose_at(len))
}

pub fn arc_pose(start: &Pose2D, kappa: f64, s: f64) -> Pose2D {
    let h = start.heading + kappa * s;
    let (x, y) = if kappa.abs() < 1e-12 {
        (s * start.heading.cos(), s * start.heading.sin())
    } else {
        (
            (h.sin() - start.heading.sin()) / kappa,
            (start.heading.cos() - h.cos()) / kappa,
        )
    };
    Pose2D::new(start.x + x, start.y + y, h)
}

/// Chain of constant-curvature lanes `(length, curvature)` named l0, l1, ...
pub fn chain(segments: &[(f64, f64)], hw: (f64, f64)) -> Vec<Lane> {
    let mut pose = Pose2D::new(0.0, 0.0, 0.0);
    let mut lanes = Vec::new();
    for (i, &(len, kappa)) in segments.iter().enumerate() {
        let next = format!("l{}", i + 1);
        let succ: Vec<&str> = if i + 1 < segments.len() { vec![next.as_str()] } else { vec![] };
        let (lane, end) = arc_lane(&format!("l{i}"), pose, len, kappa, hw, &succ);
        lanes.push(lane);
        pose = end;
    }
    lanes
}
