//! Builders for single-lane roads made of straights and arcs, with
//! piecewise-linear bound widths.

use super::scenario::LaneFile;
use crate::geometry::{heading_vec, Pose2D, Vec2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Piece {
    Straight(f64),
    /// Signed turn angle; positive turns left.
    Arc { radius: f64, angle: f64 },
}

/// `(s, left, right)` knots: distances from the centerline to each bound.
pub type WidthKnots = Vec<(f64, f64, f64)>;

pub fn constant_width(half: f64) -> WidthKnots {
    vec![(0.0, half, half)]
}

fn width_at(knots: &[(f64, f64, f64)], s: f64) -> (f64, f64) {
    let first = knots[0];
    if s <= first.0 {
        return (first.1, first.2);
    }
    for w in knots.windows(2) {
        if s <= w[1].0 {
            let u = (s - w[0].0) / (w[1].0 - w[0].0);
            return (w[0].1 + u * (w[1].1 - w[0].1), w[0].2 + u * (w[1].2 - w[0].2));
        }
    }
    let last = knots[knots.len() - 1];
    (last.1, last.2)
}

/// Total length of the pieces.
pub fn road_length(pieces: &[Piece]) -> f64 {
    pieces
        .iter()
        .map(|p| match *p {
            Piece::Straight(l) => l,
            Piece::Arc { radius, angle } => radius * angle.abs(),
        })
        .sum()
}

/// Centerline poses every `step` meters (plus the exact end).
pub fn spine(start: Pose2D, pieces: &[Piece], step: f64) -> Vec<(f64, Pose2D)> {
    let mut out = vec![(0.0, start)];
    let mut pose = start;
    let mut s0 = 0.0;
    for piece in pieces {
        let (len, kappa) = match *piece {
            Piece::Straight(l) => (l, 0.0),
            Piece::Arc { radius, angle } => (radius * angle.abs(), angle.signum() / radius),
        };
        let n = (len / step).ceil().max(1.0) as usize;
        let base = pose;
        for i in 1..=n {
            let ds = len * i as f64 / n as f64;
            let p = if kappa == 0.0 {
                base.position() + heading_vec(base.heading) * ds
            } else {
                // center of curvature to the left for kappa > 0
                let c = base.position() + Vec2::new(-base.heading.sin(), base.heading.cos()) / kappa;
                let h = base.heading + kappa * ds;
                c + Vec2::new(h.sin(), -h.cos()) / kappa
            };
            pose = Pose2D::new(p.x, p.y, base.heading + kappa * ds);
            out.push((s0 + ds, pose));
        }
        s0 += len;
    }
    out
}

/// Splits the road into lanes of about `lane_length` meters chained by
/// successor links. Lane ids are `{prefix}{index}`.
pub fn road_lanes(
    prefix: &str,
    start: Pose2D,
    pieces: &[Piece],
    widths: &[(f64, f64, f64)],
    speed_limit: f64,
    lane_length: f64,
) -> Vec<LaneFile> {
    let pts = spine(start, pieces, 0.5);
    let total = pts[pts.len() - 1].0;
    let count = (total / lane_length).round().max(1.0) as usize;
    let mut lanes = Vec::with_capacity(count);
    let mut begin = 0;
    for k in 0..count {
        let s_end = total * (k + 1) as f64 / count as f64;
        let end = if k + 1 == count {
            pts.len() - 1
        } else {
            pts.iter().position(|(s, _)| *s >= s_end - 1e-9).unwrap_or(pts.len() - 1)
        };
        let slice = &pts[begin..=end];
        let side = |sign: f64| -> Vec<Vec2> {
            slice
                .iter()
                .map(|(s, p)| {
                    let (l, r) = width_at(widths, *s);
                    let d = if sign > 0.0 { l } else { -r };
                    p.position() + Vec2::new(-p.heading.sin(), p.heading.cos()) * d
                })
                .collect()
        };
        lanes.push(LaneFile {
            id: format!("{prefix}{k}"),
            centerline: slice.iter().map(|(_, p)| p.position()).collect(),
            left_bound: side(1.0),
            right_bound: side(-1.0),
            speed_limit,
            successors: if k + 1 < count { vec![format!("{prefix}{}", k + 1)] } else { Vec::new() },
        });
        begin = end;
    }
    lanes
}
