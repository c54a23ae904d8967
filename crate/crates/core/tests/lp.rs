use heparin_core::lp::{solve_lp, LpProblem, LpStatus, Sense, Tolerances};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{random_box_lp, vertex_oracle};

const INF: f64 = f64::INFINITY;

#[test]
fn spec_example_max_x_below_one() {
    // max x s.t. x <= 1 written as x + s = 1
    let p = LpProblem::new(Sense::Maximize, vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0], vec![0.0, 0.0], vec![INF, INF])
        .unwrap();
    let s = solve_lp(&p, &Tolerances::default()).unwrap();
    assert_eq!(s.status, LpStatus::Optimal);
    assert_eq!(s.x[0], 1.0);
    assert_eq!(s.objective, 1.0);
    assert!(s.duals[0] > 0.0);
}

#[test]
fn spec_example_infeasible_certificate() {
    // x <= -1 with x >= 0
    let p = LpProblem::new(Sense::Minimize, vec![1.0, 0.0], vec![1.0, 1.0], vec![-1.0], vec![0.0, 0.0], vec![INF, INF])
        .unwrap();
    let s = solve_lp(&p, &Tolerances::default()).unwrap();
    assert_eq!(s.status, LpStatus::Infeasible);
    assert!(p.farkas_margin(s.farkas.as_ref().unwrap()) > 1e-8);
}

#[test]
fn random_lps_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tol = Tolerances::default();
    for i in 0..150 {
        let p = random_box_lp(&mut rng, i % 5 != 4);
        let s = solve_lp(&p, &tol).unwrap();
        match vertex_oracle(&p) {
            Some(best) => {
                assert_eq!(s.status, LpStatus::Optimal, "instance {i}");
                assert!((s.objective - best).abs() <= 1e-8 * best.abs().max(1.0), "instance {i}: {} vs {best}", s.objective);
                assert!(s.duality_gap <= 1e-7);
                let (eq, bound) = p.residuals(&s.x);
                assert!(eq <= 1e-8 && bound <= 1e-8);
            }
            None => {
                assert_eq!(s.status, LpStatus::Infeasible, "instance {i}");
                assert!(p.farkas_margin(s.farkas.as_ref().unwrap()) > 0.0);
            }
        }
    }
}

#[test]
fn rejects_dimension_mismatch() {
    assert!(LpProblem::new(Sense::Minimize, vec![1.0, 0.0], vec![1.0], vec![1.0], vec![0.0, 0.0], vec![INF, INF]).is_err());
    assert!(LpProblem::new(Sense::Minimize, vec![1.0], vec![1.0], vec![1.0], vec![2.0], vec![1.0]).is_err());
}

proptest! {
    #[test]
    fn scaling_the_cost_keeps_the_basis(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_box_lp(&mut rng, true);
        let mut q = p.clone();
        q.cost.iter_mut().for_each(|c| *c *= scale);
        let tol = Tolerances::default();
        let (a, b) = (solve_lp(&p, &tol).unwrap(), solve_lp(&q, &tol).unwrap());
        prop_assert_eq!(a.status, LpStatus::Optimal);
        prop_assert_eq!(&a.basis, &b.basis);
        prop_assert!((b.objective - scale * a.objective).abs() <= 1e-7 * b.objective.abs().max(1.0));
    }

    #[test]
    fn strong_duality_and_determinism(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_box_lp(&mut rng, true);
        let tol = Tolerances::default();
        let a = solve_lp(&p, &tol).unwrap();
        prop_assert!(a.duality_gap <= 1e-7);
        let b = solve_lp(&p, &tol).unwrap();
        prop_assert_eq!(a.x, b.x);
    }

    #[test]
    fn unbounded_rays_improve(seed in 0u64..10_000) {
        // One free column with a cost pulling it off to infinity.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random_box_lp(&mut rng, true);
        let n = p.cols;
        let m = p.rows;
        let mut a = Vec::with_capacity(m * (n + 2));
        for r in 0..m {
            for j in 0..n {
                a.push(p.at(r, j));
            }
            a.push(if r == 0 { 1.0 } else { 0.0 });
            a.push(if r == 0 { -1.0 } else { 0.0 });
        }
        p.a = a;
        p.cols = n + 2;
        p.cost.extend([0.0, if p.sense == Sense::Maximize { 1.0 } else { -1.0 }]);
        p.cost[n] = 0.0;
        p.lower.extend([0.0, 0.0]);
        p.upper.extend([INF, INF]);
        let s = solve_lp(&p, &Tolerances::default()).unwrap();
        prop_assert_eq!(s.status, LpStatus::Unbounded);
        let d = s.ray.unwrap();
        let gain: f64 = p.cost.iter().zip(&d).map(|(c, v)| c * v).sum();
        let improves = if p.sense == Sense::Maximize { gain > 0.0 } else { gain < 0.0 };
        prop_assert!(improves);
        for r in 0..p.rows {
            let ad: f64 = (0..p.cols).map(|j| p.at(r, j) * d[j]).sum();
            prop_assert!(ad.abs() <= 1e-8);
        }
    }
}
