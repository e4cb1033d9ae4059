//! Closed-loop episodes, replayed policy evaluation, confidence intervals and
//! significance marks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::geom::{RobotShape, Workspace};
use crate::metareason::{decide, first_stop, StoppingPolicy};
use crate::planner::{plan_init, PlannerKind, PlannerParams};
use crate::profile::{oracle_actions, quality_level, utility, Action, NormalizedProfile, UtilitySpec, FIRST_SOLUTION_CAP};

#[derive(Debug, Clone)]
pub struct EpisodeSetup<'a> {
    pub ws: &'a Workspace,
    pub shape: &'a RobotShape,
    pub params: &'a PlannerParams,
    pub kind: PlannerKind,
    pub seed: u64,
    pub q_levels: usize,
    pub t_steps: usize,
    pub budget_iters: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub stop_step: usize,
    pub utility: f64,
    /// Levels the policy observed, up to and including the stop step.
    pub history: Vec<usize>,
}

/// Runs the planner live, asking `policy` after every step whether to
/// continue. The policy sees levels normalized with `decision_optimum`; the
/// realized utility uses levels normalized with `true_optimum`.
pub fn run_episode(
    policy: &StoppingPolicy,
    setup: &EpisodeSetup<'_>,
    decision_optimum: f64,
    true_optimum: f64,
    spec: UtilitySpec,
) -> Result<Episode> {
    let (q_levels, t_steps) = (setup.q_levels, setup.t_steps);
    if setup.budget_iters == 0 || setup.budget_iters % t_steps as u64 != 0 {
        return Err(Error::InvalidInput(format!(
            "budget {} must be a positive multiple of T={t_steps}",
            setup.budget_iters
        )));
    }
    let per_step = setup.budget_iters / t_steps as u64;
    let mut st = plan_init(setup.ws, setup.shape, setup.params, setup.kind, setup.seed)?;
    st.run_until_first_solution(FIRST_SOLUTION_CAP)?;
    let worst = st.best_cost().expect("solution exists");
    let mut history = vec![quality_level(worst, worst, decision_optimum, q_levels)];
    let mut truth = quality_level(worst, worst, true_optimum, q_levels);
    for i in 0..=t_steps {
        if decide(policy, &history, i)? == Action::Stop {
            return Ok(Episode { stop_step: i, utility: utility(truth, i, spec, q_levels, t_steps), history });
        }
        st.step(per_step);
        let len = st.best_cost().expect("solutions persist");
        history.push(quality_level(worst, len, decision_optimum, q_levels));
        truth = quality_level(worst, len, true_optimum, q_levels);
    }
    unreachable!("decide stops at T")
}

/// One recorded test profile: the levels a policy observes and the levels
/// its utility is scored on (identical under the ground-truth normalizer).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub observed: NormalizedProfile,
    pub scored: NormalizedProfile,
}

impl EvalCase {
    pub fn same(p: NormalizedProfile) -> Self {
        Self { observed: p.clone(), scored: p }
    }

    pub fn key(&self) -> (u64, u64) {
        (self.scored.env_id, self.scored.run_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    /// Highest mean among the non-oracle policies.
    Best,
    /// Not significantly different from the best.
    Tied,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    pub policy: String,
    pub mean: f64,
    pub ci: f64,
    pub mark: Mark,
    /// Realized utilities in `EvalResult::keys` order.
    pub utilities: Vec<f64>,
    pub stop_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub w: f64,
    /// `(env_id, run_id)` of every test profile, sorted.
    pub keys: Vec<(u64, u64)>,
    /// The oracle first, then the policies in the order given.
    pub policies: Vec<PolicyResult>,
}

impl EvalResult {
    pub fn get(&self, name: &str) -> Option<&PolicyResult> {
        self.policies.iter().find(|p| p.policy == name)
    }
}

/// Mean and 95% half-width `1.96·s/√n` with the sample standard deviation.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Two-sided p-value of Welch's unequal-variance t-test.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return if ma == mb { 1.0 } else { 0.0 };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

pub const SIGNIFICANCE: f64 = 0.05;

/// Replays every policy on every test profile. Utilities are keyed by
/// `(env_id, run_id)` and reduced in key order.
pub fn evaluate(policies: &[StoppingPolicy], cases: &[EvalCase], spec: UtilitySpec) -> Result<EvalResult> {
    if cases.len() < 2 {
        return Err(Error::InsufficientData(format!("{} test profiles, need at least 2", cases.len())));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by_key(|&i| cases[i].key());
    let keys: Vec<_> = order.iter().map(|&i| cases[i].key()).collect();
    if keys.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("duplicate (env_id, run_id) in test set".into()));
    }
    let oracle: Vec<(usize, f64)> = order
        .iter()
        .map(|&i| {
            let l = oracle_actions(&cases[i].scored, spec);
            (l.stop_step, l.oracle_utility())
        })
        .collect();
    let summarize = |name: &str, rows: Vec<(usize, f64)>| {
        let utilities: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let (mean, ci) = mean_ci(&utilities);
        PolicyResult {
            policy: name.to_string(),
            mean,
            ci,
            mark: Mark::None,
            stop_steps: rows.iter().map(|r| r.0).collect(),
            utilities,
        }
    };
    let mut results = vec![summarize("oracle", oracle)];
    for p in policies {
        let rows: Vec<Result<(usize, f64)>> = order
            .par_iter()
            .map(|&i| {
                let c = &cases[i];
                let stop = first_stop(p, &c.observed.q)?;
                Ok((stop, c.scored.utility_at(stop, spec)))
            })
            .collect();
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        results.push(summarize(p.name(), rows));
    }
    mark(&mut results[1..]);
    Ok(EvalResult { w: spec.w, keys, policies: results })
}

fn mark(results: &mut [PolicyResult]) {
    let Some(best) = (0..results.len()).reduce(|b, i| if results[i].mean > results[b].mean { i } else { b }) else {
        return;
    };
    let best_u = results[best].utilities.clone();
    for (i, r) in results.iter_mut().enumerate() {
        r.mark = if i == best {
            Mark::Best
        } else if welch_p_value(&best_u, &r.utilities) >= SIGNIFICANCE {
            Mark::Tied
        } else {
            Mark::None
        };
    }
}
