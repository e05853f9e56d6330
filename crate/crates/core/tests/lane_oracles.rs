use hybrid_planner::geometry::{Footprint, Pose2D, Vec2};
use hybrid_planner::lane::{
    corridor_along, route_centerline, shortest_route, Lane, LaneError, LaneGraph, Route,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::arc_lane;

fn enumerate_best(lens: &[f64], succ: &[Vec<usize>], start: usize, goal: usize) -> Option<(f64, Vec<String>)> {
    fn dfs(
        at: usize, goal: usize, cost: f64, path: &mut Vec<usize>, lens: &[f64], succ: &[Vec<usize>],
        best: &mut Option<(f64, Vec<String>)>,
    ) {
        if at == goal {
            let ids: Vec<String> = path.iter().map(|i| format!("L{i}")).collect();
            let better = match best {
                None => true,
                Some((c, p)) => cost < *c || (cost == *c && ids < *p),
            };
            if better {
                *best = Some((cost, ids));
            }
            return;
        }
        for &nx in &succ[at] {
            if !path.contains(&nx) {
                path.push(nx);
                dfs(nx, goal, cost + lens[nx], path, lens, succ, best);
                path.pop();
            }
        }
    }
    let mut best = None;
    dfs(start, goal, lens[start], &mut vec![start], lens, succ, &mut best);
    best
}

#[test]
fn dijkstra_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..200 {
        let n = rng.gen_range(2..=10);
        // integer lengths make exact ties common, exercising the tie-break
        let lens: Vec<f64> = (0..n).map(|_| rng.gen_range(1..6) as f64 * 10.0).collect();
        let succ: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && rng.gen_bool(0.3)).collect())
            .collect();
        let lanes: Vec<Lane> = (0..n)
            .map(|i| {
                let names: Vec<String> = succ[i].iter().map(|j| format!("L{j}")).collect();
                let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
                arc_lane(&format!("L{i}"), Pose2D::new(0.0, 10.0 * i as f64, 0.0), lens[i], 0.0, (2.0, 2.0), &refs).0
            })
            .collect();
        let g = LaneGraph::new(lanes).unwrap();
        let (s, t) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let got = shortest_route(&g, &format!("L{s}"), &format!("L{t}"));
        match enumerate_best(&lens, &succ, s, t) {
            None => assert_eq!(got, Err(LaneError::NoRoute), "case {case}"),
            Some((cost, ids)) => {
                let r = got.unwrap();
                assert!((r.total_length - cost).abs() < 1e-9, "case {case}");
                assert_eq!(r.lane_ids, ids, "case {case}");
            }
        }
    }
}

fn curved_graph(width_left: f64) -> (LaneGraph, Route) {
    let (a, end) = arc_lane("a", Pose2D::new(0.0, 0.0, 0.0), 30.0, 1.0 / 25.0, (width_left, 2.0), &["b"]);
    let (b, _) = arc_lane("b", end, 30.0, -1.0 / 30.0, (width_left, 2.0), &[]);
    let g = LaneGraph::new(vec![a, b]).unwrap();
    let r = shortest_route(&g, "a", "b").unwrap();
    (g, r)
}

#[test]
fn corridor_limits_reach_lane_bounds_on_curves() {
    let (g, r) = curved_graph(2.0);
    let fp = Footprint::default();
    let c = corridor_along(&g, &r, &fp).unwrap();
    let left = g.lane("a").unwrap().left_bound.vertices().iter()
        .chain(g.lane("b").unwrap().left_bound.vertices())
        .copied()
        .collect::<Vec<_>>();
    let right = g.lane("a").unwrap().right_bound.vertices().iter()
        .chain(g.lane("b").unwrap().right_bound.vertices())
        .copied()
        .collect::<Vec<_>>();
    let dist_to = |pts: &[Vec2], p: &Vec2| {
        pts.windows(2)
            .map(|w| {
                let seg = w[1] - w[0];
                let u = ((p - w[0]).dot(&seg) / seg.norm_squared()).clamp(0.0, 1.0);
                (p - (w[0] + seg * u)).norm()
            })
            .fold(f64::INFINITY, f64::min)
    };
    for (i, &s) in c.stations.iter().enumerate() {
        let h = c.reference.smooth_heading_at(s);
        let (p, _) = c.reference.point_at(s);
        let n = Vec2::new(-h.sin(), h.cos());
        let pl = p + n * (c.left_limit[i] + c.inflation);
        let pr = p + n * (c.right_limit[i] - c.inflation);
        assert!(dist_to(&left, &pl) < 0.05, "station {s}");
        assert!(dist_to(&right, &pr) < 0.05, "station {s}");
        assert!(c.left_limit[i] > c.right_limit[i]);
    }
}

#[test]
fn wider_footprint_never_widens_limits() {
    let (g, r) = curved_graph(2.2);
    let narrow = corridor_along(&g, &r, &Footprint { width: 1.6, ..Footprint::default() }).unwrap();
    let wide = corridor_along(&g, &r, &Footprint { width: 2.0, ..Footprint::default() }).unwrap();
    for i in 0..narrow.stations.len() {
        assert!(wide.left_limit[i] <= narrow.left_limit[i]);
        assert!(wide.right_limit[i] >= narrow.right_limit[i]);
    }
    let too_wide = Footprint { width: 4.3, ..Footprint::default() };
    assert!(matches!(corridor_along(&g, &r, &too_wide), Err(LaneError::ImpassableCorridor(_))));
}

#[test]
fn routing_and_corridor_are_deterministic() {
    let (g1, r1) = curved_graph(2.0);
    let (g2, r2) = curved_graph(2.0);
    assert_eq!(r1, r2);
    let fp = Footprint::default();
    let c1 = corridor_along(&g1, &r1, &fp).unwrap();
    let c2 = corridor_along(&g2, &r2, &fp).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&c1.left_limit), bits(&c2.left_limit));
    assert_eq!(bits(&c1.right_limit), bits(&c2.right_limit));
    assert_eq!(bits(&c1.stations), bits(&c2.stations));
}

#[test]
fn random_five_lane_routes_have_monotone_arc_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let mut pose = Pose2D::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-3.0..3.0));
        let mut lanes = Vec::new();
        let mut total = 0.0;
        for i in 0..5 {
            let len = rng.gen_range(8.0..40.0);
            let kappa = rng.gen_range(-0.04..0.04);
            let next = format!("l{}", i + 1);
            let succ: Vec<&str> = if i < 4 { vec![next.as_str()] } else { vec![] };
            let (lane, end) = arc_lane(&format!("l{i}"), pose, len, kappa, (2.0, 2.0), &succ);
            total += lane.length();
            lanes.push(lane);
            pose = end;
        }
        let g = LaneGraph::new(lanes).unwrap();
        let r = shortest_route(&g, "l0", "l4").unwrap();
        let c = route_centerline(&g, &r).unwrap();
        assert!(c.arc_lengths().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(c.arc_lengths()[0], 0.0);
        assert!((c.length() - total).abs() < 0.5);
    }
}
