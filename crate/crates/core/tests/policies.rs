use std::collections::HashMap;

use metastop_core::metareason::{
    decide, first_stop, fit_transition, solve_dp, train_classifier_with, train_rnn_with, DiscreteState, FeatureSet,
    PolicyKind, TransitionModel,
};
use metastop_core::nn::{Loss, TrainConfig};
use metastop_core::profile::{oracle_actions, utility, Action, LabeledProfile, NormalizedProfile, UtilitySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn profile(q: Vec<usize>, q_levels: usize) -> NormalizedProfile {
    NormalizedProfile { env_id: 0, run_id: 0, worst_length: 2.0, optimal_length_used: 1.0, t_steps: q.len() - 1, q, q_levels }
}

fn random_model(rng: &mut ChaCha8Rng, q_levels: usize, t_steps: usize, fs: FeatureSet) -> TransitionModel {
    let mut m = TransitionModel::new(q_levels, t_steps, fs, rng.random_range(0.05..1.0)).unwrap();
    // random counts along random monotone walks
    for _ in 0..rng.random_range(0..6) {
        let mut s = DiscreteState::from_history(&[rng.random_range(0..=q_levels)]);
        for _ in 0..t_steps {
            let next = rng.random_range(s.q..=q_levels);
            m.add_count(&s, next, rng.random_range(1..4)).unwrap();
            s = s.advance(next);
        }
    }
    m
}

/// Every state reachable from `start` before the horizon, in discovery order.
fn reachable(m: &TransitionModel, start: DiscreteState) -> Vec<DiscreteState> {
    let mut out = vec![start];
    let mut k = 0;
    while k < out.len() {
        let s = out[k];
        if s.i + 1 < m.t_steps {
            for (next, _) in m.next_level_probs(&s) {
                let n = s.advance(next);
                if !out.contains(&n) {
                    out.push(n);
                }
            }
        }
        k += 1;
    }
    out
}

/// Expected utility from `s` of the rule "stop in the states flagged in
/// `stop`", by direct recursion over successors.
fn rule_value(
    m: &TransitionModel,
    spec: UtilitySpec,
    stop: &HashMap<DiscreteState, bool>,
    s: DiscreteState,
) -> f64 {
    let u = utility(s.q, s.i, spec, m.q_levels, m.t_steps);
    if s.i == m.t_steps || stop[&s] {
        return u;
    }
    m.next_level_probs(&s).into_iter().map(|(next, p)| p * rule_value(m, spec, stop, s.advance(next))).sum()
}

#[test]
fn dp_matches_exhaustive_rule_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let sets: [FeatureSet; 2] = ["t,q".parse().unwrap(), "t,q,q_prev".parse().unwrap()];
    let mut checked = 0;
    for case in 0..160 {
        let fs = sets[case % 2];
        let q_levels = rng.random_range(1..=2);
        let t_steps = rng.random_range(1..=if fs.q_prev { 3 } else { 4 });
        let m = random_model(&mut rng, q_levels, t_steps, fs);
        let spec = UtilitySpec::new(rng.random_range(0.0..1.0)).unwrap();
        let policy = solve_dp(&m, spec).unwrap();
        let PolicyKind::Dp(dp) = &policy.kind else { panic!("dp policy expected") };
        let start = DiscreteState::from_history(&[rng.random_range(0..=q_levels)]);
        let states = reachable(&m, start);
        if states.len() > 16 {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << states.len()) {
            let rule: HashMap<_, _> = states.iter().enumerate().map(|(k, s)| (*s, mask >> k & 1 == 1)).collect();
            best = best.max(rule_value(&m, spec, &rule, start));
        }
        let dp_rule: HashMap<_, _> = states.iter().map(|s| (*s, dp.stops(s).unwrap())).collect();
        let v = dp.value(&start).unwrap();
        assert!((v - best).abs() < 1e-10, "case {case}: dp {v} vs enumeration {best}");
        assert!((rule_value(&m, spec, &dp_rule, start) - best).abs() < 1e-10, "case {case}: dp rule is suboptimal");
        checked += 1;
    }
    assert!(checked >= 100);
}

fn labeled(q: Vec<usize>, q_levels: usize, spec: UtilitySpec) -> LabeledProfile {
    oracle_actions(&profile(q, q_levels), spec)
}

#[test]
fn classifier_learns_constant_stop_at_zero() {
    let spec = UtilitySpec::new(0.8).unwrap();
    let data: Vec<_> = (0..=10).map(|lvl| labeled(vec![lvl; 11], 10, spec)).collect();
    assert!(data.iter().all(|l| l.stop_step == 0));
    let cfg = TrainConfig::new(Loss::SoftmaxCrossEntropy, 1e-2, 16, 100, 3);
    let p = train_classifier_with(&data, FeatureSet::all(), &[16, 8], &cfg).unwrap();
    for l in &data {
        assert_eq!(decide(&p, &l.profile.q[..1], 0).unwrap(), Action::Stop);
    }
}

#[test]
fn classifier_learns_time_threshold() {
    let (q_levels, t_steps) = (10, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let make = |rng: &mut ChaCha8Rng| {
        let mut q = vec![0usize];
        for _ in 0..t_steps {
            let last = *q.last().unwrap();
            q.push((last + rng.random_range(0..=1)).min(q_levels));
        }
        let actions: Vec<Action> =
            (0..=t_steps).map(|i| if 2 * i > t_steps { Action::Stop } else { Action::Continue }).collect();
        LabeledProfile { profile: profile(q, q_levels), w: 0.5, actions, stop_step: t_steps / 2 + 1 }
    };
    let train: Vec<_> = (0..60).map(|_| make(&mut rng)).collect();
    let test: Vec<_> = (0..30).map(|_| make(&mut rng)).collect();
    let cfg = TrainConfig::new(Loss::SoftmaxCrossEntropy, 1e-2, 32, 150, 8);
    let p = train_classifier_with(&train, FeatureSet::all(), &[16, 8], &cfg).unwrap();
    let (mut right, mut total) = (0, 0);
    for l in &test {
        for i in 0..t_steps {
            right += usize::from(decide(&p, &l.profile.q[..=i], i).unwrap() == l.actions[i]);
            total += 1;
        }
    }
    assert!(right as f64 / total as f64 >= 0.99, "{right}/{total}");
}

/// Quality rises one level per step until `peak`, then stays flat.
fn peaked(peak: usize, q_levels: usize, t_steps: usize) -> Vec<usize> {
    (0..=t_steps).map(|i| i.min(peak).min(q_levels)).collect()
}

#[test]
fn rnn_stops_near_the_utility_peak() {
    let (q_levels, t_steps) = (20, 20);
    let spec = UtilitySpec::new(0.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train: Vec<_> =
        (0..120).map(|_| labeled(peaked(rng.random_range(2..=17), q_levels, t_steps), q_levels, spec)).collect();
    assert!(train.iter().all(|l| l.stop_step == l.profile.q[l.stop_step]));
    let mut cfg = TrainConfig::new(Loss::SoftmaxCrossEntropy, 5e-3, 8, 60, 4);
    cfg.clip_norm = Some(5.0);
    let p = train_rnn_with(&train, 16, &cfg).unwrap();
    let test: Vec<usize> = (0..40).map(|_| rng.random_range(2..=17)).collect();
    let near = test
        .iter()
        .filter(|&&peak| first_stop(&p, &peaked(peak, q_levels, t_steps)).unwrap().abs_diff(peak) <= 2)
        .count();
    assert!(near as f64 >= 0.9 * test.len() as f64, "{near}/{}", test.len());

    // constant utility sequences stop immediately
    let flat = labeled(vec![0; t_steps + 1], q_levels, spec);
    assert_eq!(flat.stop_step, 0);
}

#[test]
fn transition_fit_counts_every_consecutive_pair() {
    let data = vec![profile(vec![0, 1, 1, 3], 3), profile(vec![1, 1, 2, 3], 3)];
    let m = fit_transition(&data, "q".parse().unwrap(), 0.0).unwrap();
    // from level 1: 1→1 twice, 1→3 once, 1→2 once
    let s = DiscreteState { i: 0, q: 1, q_prev: 1, flatness: 0 };
    let row = m.row(&s);
    assert_eq!(row, vec![0.5, 0.25, 0.25]);
}
