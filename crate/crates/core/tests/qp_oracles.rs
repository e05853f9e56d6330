use hybrid_planner::qp::{solve_qp, QpProblem, QpSettings};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.1
}

/// Random equality-constrained QP with its KKT solution from one dense LU.
fn equality_case(rng: &mut ChaCha8Rng) -> (QpProblem, DVector<f64>) {
    let n = rng.gen_range(1..=10);
    let m = rng.gen_range(0..n);
    let h = random_spd(rng, n);
    let f = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let b = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
    // [H A'; A 0] [x; -y] = [-f; b]
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&h);
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(&a);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-&f));
    rhs.rows_mut(n, m).copy_from(&b);
    let sol = kkt.lu().solve(&rhs).expect("random KKT system is nonsingular");
    let mut p = QpProblem::unconstrained(h, f);
    p.a_eq = a;
    p.b_eq = b;
    (p, sol.rows(0, n).into_owned())
}

#[test]
fn equality_qps_match_direct_kkt_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let settings = QpSettings::default();
    for case in 0..100 {
        let (p, x_ref) = equality_case(&mut rng);
        let sol = solve_qp(&p, &settings).unwrap();
        let err = (&sol.x - &x_ref).amax();
        assert!(err <= 1e-6, "case {case}: |x - x_kkt| = {err}");
        assert!(sol.kkt_residual <= settings.kkt_tol);
    }
}

// Enumerates active sets of single-sided constraints A x <= b and keeps the
// best feasible stationary point with non-negative multipliers.
fn brute_force(h: &DMatrix<f64>, f: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (m, n) = a.shape();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = act.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-f));
        for (j, &i) in act.iter().enumerate() {
            for c in 0..n {
                kkt[(c, n + j)] = a[(i, c)];
                kkt[(n + j, c)] = a[(i, c)];
            }
            rhs[n + j] = b[i];
        }
        let Some(s) = kkt.lu().solve(&rhs) else { continue };
        let x = s.rows(0, n).into_owned();
        let duals_ok = (0..k).all(|j| s[n + j] >= -1e-9);
        let feasible = (0..m).all(|i| (a.row(i) * &x)[0] <= b[i] + 1e-9);
        if duals_ok && feasible {
            let obj = 0.5 * x.dot(&(h * &x)) + f.dot(&x);
            if best.as_ref().map_or(true, |(o, _)| obj < *o) {
                best = Some((obj, x));
            }
        }
    }
    best.expect("feasible by construction").1
}

#[test]
fn inequality_qps_match_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..60 {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=6);
        let h = random_spd(&mut rng, n);
        let f = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        // origin strictly feasible
        let b = DVector::from_fn(m, |_, _| rng.gen_range(0.1..2.0));
        let x_ref = brute_force(&h, &f, &a, &b);
        let mut p = QpProblem::unconstrained(h, f);
        p.a_in = a;
        p.lb = DVector::from_element(m, f64::NEG_INFINITY);
        p.ub = b;
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        let err = (&sol.x - &x_ref).amax();
        assert!(err <= 1e-6, "case {case}: {err}");
    }
}

#[test]
fn kkt_residual_certifies_random_boxed_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let settings = QpSettings::default();
    for _ in 0..50 {
        let n = rng.gen_range(2..=12);
        let h = random_spd(&mut rng, n);
        let f = DVector::from_fn(n, |_, _| rng.gen_range(-20.0..20.0));
        let mut p = QpProblem::unconstrained(h, f);
        p.a_in = DMatrix::identity(n, n);
        p.lb = DVector::from_element(n, -1.0);
        p.ub = DVector::from_element(n, 1.0);
        let sol = solve_qp(&p, &settings).unwrap();
        assert!(sol.kkt_residual <= settings.kkt_tol);
        assert!(p.primal_infeasibility(&sol.x) <= 1e-9);
    }
}
