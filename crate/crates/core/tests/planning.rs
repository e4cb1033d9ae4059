use std::f64::consts::FRAC_PI_2;

use metastop_core::envgen::{sample_workspace, DistributionSpec};
use metastop_core::planner::plan_init;
use metastop_core::predictor::long_run_optimum;
use metastop_core::profile::{normalize, record_profile, DEFAULT_BUDGET, DEFAULT_Q};
use metastop_core::{Config, PlannerKind, PlannerParams, RobotShape, Workspace};

fn open_world() -> Workspace {
    Workspace::new(500.0, 500.0, vec![], Config::new(60.0, 60.0, 0.0), Config::new(440.0, 440.0, FRAC_PI_2)).unwrap()
}

#[test]
fn obstacle_free_rrt_star_approaches_straight_line() {
    let ws = open_world();
    let params = PlannerParams::default();
    let lower = 380.0f64.hypot(380.0) + params.rot_weight * FRAC_PI_2;
    let mut st = plan_init(&ws, &RobotShape::l_shape(), &params, PlannerKind::RrtStar, 7).unwrap();
    st.step(20_000);
    let best = st.best_cost().unwrap();
    assert!(best >= lower - 1e-9, "{best} below the metric lower bound {lower}");
    assert!(best <= 1.05 * lower, "{best} not within 5% of {lower}");
}

#[test]
fn obstacle_free_prm_star_approaches_straight_line() {
    let ws = open_world();
    let params = PlannerParams::default();
    let lower = 380.0f64.hypot(380.0) + params.rot_weight * FRAC_PI_2;
    let mut st = plan_init(&ws, &RobotShape::l_shape(), &params, PlannerKind::PrmStar, 7).unwrap();
    st.step(5_000);
    let best = st.best_cost().unwrap();
    assert!(best >= lower - 1e-9 && best <= 1.05 * lower, "{best} vs {lower}");
}

/// Runs whose final path rises above the middle wall segment took the
/// wide opening at the top.
fn took_wide_passage(ws: &Workspace, path: &metastop_core::Path) -> bool {
    let top_of_middle_wall = ws.obstacles.iter().map(|o| o.y_max).filter(|&y| y < ws.height).fold(0.0, f64::max);
    path.waypoints().iter().any(|c| c.y > top_of_middle_wall)
}

#[test]
fn two_passage_batch_uses_both_homotopy_classes() {
    let shape = RobotShape::l_shape();
    let ws = sample_workspace(&DistributionSpec::motivating_example(), &shape, 0).unwrap();
    let params = PlannerParams::default();
    let (mut narrow, mut wide) = (0, 0);
    for seed in 0..20 {
        let mut st = plan_init(&ws, &shape, &params, PlannerKind::RrtStar, seed).unwrap();
        st.run_until_first_solution(20_000).unwrap();
        st.step(DEFAULT_BUDGET);
        let (path, _) = st.best_path().unwrap();
        if took_wide_passage(&ws, &path) {
            wide += 1;
        } else {
            narrow += 1;
        }
    }
    assert!(narrow > 0 && wide > 0, "narrow {narrow}, wide {wide}");
}

#[test]
fn two_passage_profile_has_a_large_single_step_drop() {
    let shape = RobotShape::l_shape();
    let ws = sample_workspace(&DistributionSpec::motivating_example(), &shape, 0).unwrap();
    let params = PlannerParams::default();
    let found = (0..20).any(|seed| {
        let p = record_profile(&ws, &shape, &params, PlannerKind::RrtStar, seed, 4000, 200).unwrap();
        p.lengths.windows(2).any(|w| w[1] < 0.9 * w[0])
    });
    assert!(found);
}

#[test]
fn profiles_are_monotone_and_normalize_into_range() {
    let shape = RobotShape::l_shape();
    let params = PlannerParams::default();
    for (k, spec) in [DistributionSpec::two_passage(), DistributionSpec::random_blocks()].iter().enumerate() {
        let ws = sample_workspace(spec, &shape, 3).unwrap();
        let opt = long_run_optimum(&ws, &shape, &params, PlannerKind::RrtStar, 99, 20_000).unwrap();
        for seed in 0..3 {
            let raw = record_profile(&ws, &shape, &params, PlannerKind::RrtStar, 10 * k as u64 + seed, 2000, 100).unwrap();
            assert!(raw.lengths.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(raw.iters_per_step, 20);
            if raw.worst_length > opt {
                let q = normalize(&raw, opt, DEFAULT_Q).unwrap();
                assert!(q.q.windows(2).all(|w| w[1] >= w[0]));
                assert!(q.q.iter().all(|&l| l <= DEFAULT_Q));
            }
        }
    }
}

#[test]
fn one_iteration_per_step_when_budget_equals_t() {
    let shape = RobotShape::l_shape();
    let raw = record_profile(&open_world(), &shape, &PlannerParams::default(), PlannerKind::RrtStar, 1, 50, 50).unwrap();
    assert_eq!(raw.iters_per_step, 1);
    assert_eq!(raw.lengths.len(), 51);
}
