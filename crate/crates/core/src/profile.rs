//! Performance profiles: recording, normalization, utilities, oracle labels,
//! per-step features, and the profile dataset format.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{RobotShape, Workspace};
use crate::planner::{plan_init, PlannerKind, PlannerParams};

pub const DEFAULT_Q: usize = 30;
pub const DEFAULT_T: usize = 200;
/// Post-first-solution iteration budget of one profile.
pub const DEFAULT_BUDGET: u64 = 10_000;
/// Iterations allowed to find the first feasible path.
pub const FIRST_SOLUTION_CAP: u64 = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub w: f64,
}

impl UtilitySpec {
    pub fn new(w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::InvalidInput(format!("utility weight {w} outside [0, 1]")));
        }
        Ok(Self { w })
    }
}

/// `w·(q/Q) − (1−w)·(t/T)`.
pub fn utility(q_level: usize, t_step: usize, spec: UtilitySpec, q_levels: usize, t_steps: usize) -> f64 {
    debug_assert!(q_level <= q_levels && t_step <= t_steps);
    spec.w * (q_level as f64 / q_levels as f64) - (1.0 - spec.w) * (t_step as f64 / t_steps as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Continue,
    Stop,
}

/// Best-path lengths at decision steps `0..=T`, step 0 being the first
/// feasible solution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawProfile {
    pub env_id: u64,
    pub run_id: u64,
    pub worst_length: f64,
    pub lengths: Vec<f64>,
    pub iters_per_step: u64,
    pub first_solution_iters: u64,
}

impl RawProfile {
    pub fn steps(&self) -> usize {
        self.lengths.len() - 1
    }
}

/// Runs the planner to its first solution, then `t_steps` chunks of
/// `budget_iters / t_steps` iterations, sampling the best length after each.
#[allow(clippy::too_many_arguments)]
pub fn record_profile(
    ws: &Workspace,
    shape: &RobotShape,
    params: &PlannerParams,
    kind: PlannerKind,
    seed: u64,
    budget_iters: u64,
    t_steps: usize,
) -> Result<RawProfile> {
    if t_steps == 0 || budget_iters % t_steps as u64 != 0 || budget_iters == 0 {
        return Err(Error::InvalidInput(format!(
            "budget {budget_iters} must be a positive multiple of T={t_steps}"
        )));
    }
    let mut st = plan_init(ws, shape, params, kind, seed)?;
    let first_solution_iters = st.run_until_first_solution(FIRST_SOLUTION_CAP)?;
    let per_step = budget_iters / t_steps as u64;
    let worst = st.best_cost().expect("solution exists");
    let mut lengths = Vec::with_capacity(t_steps + 1);
    lengths.push(worst);
    for _ in 0..t_steps {
        st.step(per_step);
        lengths.push(st.best_cost().expect("solutions persist"));
    }
    Ok(RawProfile {
        env_id: 0,
        run_id: 0,
        worst_length: worst,
        lengths,
        iters_per_step: per_step,
        first_solution_iters,
    })
}

/// Quality levels `q[0..=T]` in `0..=Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedProfile {
    pub env_id: u64,
    pub run_id: u64,
    pub worst_length: f64,
    pub optimal_length_used: f64,
    pub q: Vec<usize>,
    pub q_levels: usize,
    pub t_steps: usize,
}

impl NormalizedProfile {
    /// True when the first solution was already no longer than the optimum
    /// used; such profiles sit at level Q throughout.
    pub fn is_degenerate(&self) -> bool {
        self.worst_length <= self.optimal_length_used
    }

    pub fn utility_at(&self, i: usize, spec: UtilitySpec) -> f64 {
        utility(self.q[i], i, spec, self.q_levels, self.t_steps)
    }

    pub fn utilities(&self, spec: UtilitySpec) -> Vec<f64> {
        (0..=self.t_steps).map(|i| self.utility_at(i, spec)).collect()
    }

    fn check(&self) -> Result<()> {
        if self.q.len() != self.t_steps + 1 {
            return Err(Error::InvalidInput(format!(
                "profile has {} levels, expected T+1 = {}",
                self.q.len(),
                self.t_steps + 1
            )));
        }
        if let Some(&bad) = self.q.iter().find(|&&q| q > self.q_levels) {
            return Err(Error::InvalidInput(format!("level {bad} exceeds Q={}", self.q_levels)));
        }
        if self.q.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput(format!(
                "profile ({}, {}) decreases in quality",
                self.env_id, self.run_id
            )));
        }
        Ok(())
    }
}

/// Level of a path of length `len` given the first-solution length `worst`
/// and an optimal-length estimate: `(worst − len)/(worst − optimal)` clamped
/// to `[0, 1]` and rounded half-up to `0..=Q`. Level Q when
/// `worst <= optimal`.
pub fn quality_level(worst: f64, len: f64, optimal: f64, q_levels: usize) -> usize {
    if worst <= optimal {
        return q_levels;
    }
    let q = ((worst - len) / (worst - optimal)).clamp(0.0, 1.0);
    ((q * q_levels as f64 + 0.5).floor() as usize).min(q_levels)
}

/// Continuous quality `(worst − current)/(worst − optimal)`, clamped to
/// `[0, 1]` and rounded half-up to `Q` levels.
pub fn normalize(raw: &RawProfile, optimal_length: f64, q_levels: usize) -> Result<NormalizedProfile> {
    if raw.worst_length <= optimal_length {
        return Err(Error::DegenerateProfile {
            worst: raw.worst_length,
            optimal: optimal_length,
        });
    }
    normalize_lenient(raw, optimal_length, q_levels)
}

/// [`normalize`] that maps degenerate profiles to level Q at every step
/// instead of failing. Check [`NormalizedProfile::is_degenerate`].
pub fn normalize_lenient(raw: &RawProfile, optimal_length: f64, q_levels: usize) -> Result<NormalizedProfile> {
    if !(optimal_length > 0.0) || q_levels == 0 {
        return Err(Error::InvalidInput("optimal length must be positive and Q >= 1".into()));
    }
    if raw.lengths.is_empty() {
        return Err(Error::InvalidInput("empty raw profile".into()));
    }
    let worst = raw.worst_length;
    let q = raw
        .lengths
        .iter()
        .map(|&len| quality_level(worst, len, optimal_length, q_levels))
        .collect();
    Ok(NormalizedProfile {
        env_id: raw.env_id,
        run_id: raw.run_id,
        worst_length: worst,
        optimal_length_used: optimal_length,
        q,
        q_levels,
        t_steps: raw.steps(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledProfile {
    pub profile: NormalizedProfile,
    pub w: f64,
    pub actions: Vec<Action>,
    pub stop_step: usize,
}

impl LabeledProfile {
    pub fn spec(&self) -> UtilitySpec {
        UtilitySpec { w: self.w }
    }

    pub fn oracle_utility(&self) -> f64 {
        self.profile.utility_at(self.stop_step, self.spec())
    }
}

fn actions_for(stop_step: usize, len: usize) -> Vec<Action> {
    (0..len)
        .map(|i| if i < stop_step { Action::Continue } else { Action::Stop })
        .collect()
}

/// Index of the largest utility; ties go to the earliest step.
pub fn oracle_stop_step(utilities: &[f64]) -> usize {
    let mut best = 0;
    for (i, &u) in utilities.iter().enumerate().skip(1) {
        if u > utilities[best] {
            best = i;
        }
    }
    best
}

/// Hindsight-optimal labels: continue before the utility argmax, stop at and
/// after it.
pub fn oracle_actions(p: &NormalizedProfile, spec: UtilitySpec) -> LabeledProfile {
    let stop_step = oracle_stop_step(&p.utilities(spec));
    LabeledProfile {
        profile: p.clone(),
        w: spec.w,
        actions: actions_for(stop_step, p.q.len()),
        stop_step,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    /// Normalized time in `[0, 1]`.
    pub t: f64,
    pub q_now: usize,
    pub q_prev: usize,
    /// One-step derivative of normalized quality per normalized time.
    pub slope: f64,
    /// Consecutive earlier steps at the current level.
    pub flatness: usize,
}

/// Features of the profile prefix `q[0..=i]`. At `i = 0` slope and flatness are 0.
pub fn features_at(p: &NormalizedProfile, i: usize) -> FeatureVector {
    features_of_history(&p.q[..=i], p.q_levels, p.t_steps)
}

/// Features at the last step of `history`.
pub fn features_of_history(history: &[usize], q_levels: usize, t_steps: usize) -> FeatureVector {
    let i = history.len() - 1;
    let q_now = history[i];
    let q_prev = if i == 0 { history[0] } else { history[i - 1] };
    let slope = (q_now as f64 - q_prev as f64) / q_levels as f64 * t_steps as f64;
    let flatness = history[..i].iter().rev().take_while(|&&q| q == q_now).count();
    FeatureVector {
        t: i as f64 / t_steps as f64,
        q_now,
        q_prev,
        slope,
        flatness,
    }
}

const PROFILE_MAGIC: &str = "#metastop-profiles v1";

fn header(q_levels: usize, t_steps: usize) -> String {
    format!("{PROFILE_MAGIC} Q={q_levels} T={t_steps}\n")
}

fn push_profile_row(out: &mut String, p: &NormalizedProfile) {
    write!(out, "{},{},{},{}", p.env_id, p.run_id, p.worst_length, p.optimal_length_used).unwrap();
    for q in &p.q {
        write!(out, ",{q}").unwrap();
    }
}

/// Serializes profiles sharing Q and T.
pub fn write_profiles(profiles: &[NormalizedProfile]) -> Result<String> {
    let (q_levels, t_steps) = shared_dims(profiles.iter())?;
    let mut out = header(q_levels, t_steps);
    for p in profiles {
        push_profile_row(&mut out, p);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_labeled(labeled: &[LabeledProfile]) -> Result<String> {
    let (q_levels, t_steps) = shared_dims(labeled.iter().map(|l| &l.profile))?;
    let mut out = header(q_levels, t_steps);
    for l in labeled {
        push_profile_row(&mut out, &l.profile);
        writeln!(out, ",{},{}", l.w, l.stop_step).unwrap();
    }
    Ok(out)
}

fn shared_dims<'a>(mut it: impl Iterator<Item = &'a NormalizedProfile>) -> Result<(usize, usize)> {
    let first = it.next().ok_or(Error::EmptyDataset)?;
    let dims = (first.q_levels, first.t_steps);
    if it.any(|p| (p.q_levels, p.t_steps) != dims) {
        return Err(Error::InvalidInput("profiles disagree on Q or T".into()));
    }
    Ok(dims)
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let rest = line
        .strip_prefix(PROFILE_MAGIC)
        .ok_or_else(|| Error::Parse(format!("bad dataset header '{line}'")))?;
    let mut q = None;
    let mut t = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("Q=") {
            q = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("T=") {
            t = v.parse().ok();
        }
    }
    match (q, t) {
        (Some(q), Some(t)) => Ok((q, t)),
        _ => Err(Error::Parse(format!("dataset header lacks Q/T: '{line}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {what} '{s}'")))
}

fn read_rows(text: &str, labeled: bool) -> Result<Vec<(NormalizedProfile, Option<(f64, usize)>)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| Error::Parse("empty dataset".into()))?;
    let (q_levels, t_steps) = parse_header(head)?;
    let expected = 4 + t_steps + 1 + if labeled { 2 } else { 0 };
    let mut out = Vec::new();
    for (ln, line) in lines {
        let ln = ln + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != expected {
            return Err(Error::Parse(format!("line {ln}: {} fields, expected {expected}", f.len())));
        }
        let q = f[4..4 + t_steps + 1]
            .iter()
            .map(|s| parse_num::<usize>(s, "level", ln))
            .collect::<Result<Vec<_>>>()?;
        let p = NormalizedProfile {
            env_id: parse_num(f[0], "env_id", ln)?,
            run_id: parse_num(f[1], "run_id", ln)?,
            worst_length: parse_num(f[2], "worst_length", ln)?,
            optimal_length_used: parse_num(f[3], "optimal_length_used", ln)?,
            q,
            q_levels,
            t_steps,
        };
        p.check()?;
        let label = if labeled {
            let w: f64 = parse_num(f[expected - 2], "w", ln)?;
            let stop: usize = parse_num(f[expected - 1], "stop_step", ln)?;
            if stop > t_steps || !(0.0..=1.0).contains(&w) {
                return Err(Error::Parse(format!("line {ln}: label out of range")));
            }
            Some((w, stop))
        } else {
            None
        };
        out.push((p, label));
    }
    Ok(out)
}

pub fn read_profiles(text: &str) -> Result<Vec<NormalizedProfile>> {
    Ok(read_rows(text, false)?.into_iter().map(|(p, _)| p).collect())
}

/// Reads labeled profiles; the action sequence is rebuilt from `stop_step`
/// as one continue block followed by one stop block.
pub fn read_labeled(text: &str) -> Result<Vec<LabeledProfile>> {
    Ok(read_rows(text, true)?
        .into_iter()
        .map(|(p, label)| {
            let (w, stop_step) = label.expect("labeled rows");
            LabeledProfile {
                actions: actions_for(stop_step, p.q.len()),
                profile: p,
                w,
                stop_step,
            }
        })
        .collect())
}

const RAW_MAGIC: &str = "#metastop-raw v1";

/// Serializes raw profiles sharing T. Rows are
/// `env_id,run_id,iters_per_step,first_solution_iters,len0..lenT`.
pub fn write_raw(profiles: &[RawProfile]) -> Result<String> {
    let first = profiles.first().ok_or(Error::EmptyDataset)?;
    let t_steps = first.steps();
    if profiles.iter().any(|p| p.steps() != t_steps) {
        return Err(Error::InvalidInput("raw profiles disagree on T".into()));
    }
    let mut out = format!("{RAW_MAGIC} T={t_steps}\n");
    for p in profiles {
        write!(out, "{},{},{},{}", p.env_id, p.run_id, p.iters_per_step, p.first_solution_iters).unwrap();
        for l in &p.lengths {
            write!(out, ",{l}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn read_raw(text: &str) -> Result<Vec<RawProfile>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| Error::Parse("empty raw dataset".into()))?;
    let t_steps: usize = head
        .strip_prefix(RAW_MAGIC)
        .and_then(|r| r.trim().strip_prefix("T="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad raw header '{head}'")))?;
    let mut out = Vec::new();
    for (ln, line) in lines {
        let ln = ln + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 + t_steps + 1 {
            return Err(Error::Parse(format!("line {ln}: {} fields, expected {}", f.len(), 5 + t_steps)));
        }
        let lengths = f[4..]
            .iter()
            .map(|s| parse_num::<f64>(s, "length", ln))
            .collect::<Result<Vec<_>>>()?;
        if lengths.iter().any(|l| !l.is_finite() || *l <= 0.0) || lengths.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Parse(format!("line {ln}: lengths must be positive and non-increasing")));
        }
        out.push(RawProfile {
            env_id: parse_num(f[0], "env_id", ln)?,
            run_id: parse_num(f[1], "run_id", ln)?,
            iters_per_step: parse_num(f[2], "iters_per_step", ln)?,
            first_solution_iters: parse_num(f[3], "first_solution_iters", ln)?,
            worst_length: lengths[0],
            lengths,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(lengths: Vec<f64>) -> RawProfile {
        RawProfile {
            env_id: 3,
            run_id: 1,
            worst_length: lengths[0],
            lengths,
            iters_per_step: 1,
            first_solution_iters: 10,
        }
    }

    fn profile(q: Vec<usize>, q_levels: usize) -> NormalizedProfile {
        NormalizedProfile {
            env_id: 0,
            run_id: 0,
            worst_length: 10.0,
            optimal_length_used: 5.0,
            t_steps: q.len() - 1,
            q,
            q_levels,
        }
    }

    #[test]
    fn normalize_examples() {
        let p = normalize(&raw(vec![10.0, 10.0, 7.5, 5.0]), 5.0, 30).unwrap();
        assert_eq!(p.q, vec![0, 0, 15, 30]);
        assert!(matches!(
            normalize(&raw(vec![5.0, 5.0]), 5.0, 30),
            Err(Error::DegenerateProfile { .. })
        ));
        let d = normalize_lenient(&raw(vec![5.0, 5.0]), 6.0, 30).unwrap();
        assert!(d.is_degenerate());
        assert_eq!(d.q, vec![30, 30]);
        // under-predicted optimum clamps to Q
        let c = normalize(&raw(vec![10.0, 4.0]), 5.0, 30).unwrap();
        assert_eq!(c.q, vec![0, 30]);
    }

    #[test]
    fn half_levels_round_up() {
        // q = 0.25 with Q = 2 sits exactly on 0.5 levels
        let p = normalize(&raw(vec![8.0, 7.0]), 4.0, 2).unwrap();
        assert_eq!(p.q, vec![0, 1]);
    }

    #[test]
    fn utility_examples() {
        let s = UtilitySpec::new(0.8).unwrap();
        assert!((utility(30, 0, s, 30, 200) - 0.8).abs() < 1e-12);
        assert!((utility(0, 200, s, 30, 200) + 0.2).abs() < 1e-12);
        assert!((utility(15, 100, s, 30, 200) - 0.3).abs() < 1e-12);
        assert!(UtilitySpec::new(1.5).is_err());
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_stop_step(&[0.1, 0.3, 0.2]), 1);
        assert_eq!(oracle_stop_step(&[0.1, 0.3, 0.3]), 1);
        let flat = profile(vec![4; 11], 30);
        let l = oracle_actions(&flat, UtilitySpec::new(0.9).unwrap());
        assert_eq!(l.stop_step, 0);
        assert!(l.actions.iter().all(|&a| a == Action::Stop));

        let p = profile(vec![0, 10, 10, 10], 10);
        let l = oracle_actions(&p, UtilitySpec::new(0.8).unwrap());
        assert_eq!(l.stop_step, 1);
        assert_eq!(l.actions, vec![Action::Continue, Action::Stop, Action::Stop, Action::Stop]);
    }

    #[test]
    fn feature_examples() {
        let mut q = vec![0; 201];
        q[99] = 15;
        q[100] = 18;
        let p = profile(q, 30);
        let f = features_at(&p, 100);
        assert!((f.slope - 20.0).abs() < 1e-9);
        assert_eq!((f.q_now, f.q_prev), (18, 15));

        let p = profile(vec![1, 2, 5, 5, 5, 5, 5], 30);
        assert_eq!(features_at(&p, 6).flatness, 4);
        let f0 = features_at(&p, 0);
        assert_eq!((f0.slope, f0.flatness, f0.q_prev), (0.0, 0, 1));
    }

    #[test]
    fn record_rejects_bad_budget() {
        let ws = Workspace::new(
            500.0,
            500.0,
            vec![],
            crate::Config::new(50.0, 50.0, 0.0),
            crate::Config::new(450.0, 450.0, 0.0),
        )
        .unwrap();
        let shape = RobotShape::l_shape();
        let err = record_profile(&ws, &shape, &PlannerParams::default(), PlannerKind::RrtStar, 1, 101, 10);
        assert!(err.is_err());
        let p = record_profile(&ws, &shape, &PlannerParams::default(), PlannerKind::RrtStar, 1, 10, 10).unwrap();
        assert_eq!(p.iters_per_step, 1);
        assert_eq!(p.lengths.len(), 11);
        assert_eq!(p.lengths[0], p.worst_length);
        assert!(p.lengths.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let mut a = normalize(&raw(vec![1000.123456789, 900.5, 512.25]), 433.3333333333333, 30).unwrap();
        a.env_id = 17;
        let b = profile(vec![0, 3, 30], 30);
        let text = write_profiles(&[a.clone(), b.clone()]).unwrap();
        assert!(text.starts_with("#metastop-profiles v1 Q=30 T=2\n"));
        assert_eq!(read_profiles(&text).unwrap(), vec![a.clone(), b]);

        let l = oracle_actions(&a, UtilitySpec::new(0.8).unwrap());
        let text = write_labeled(&[l.clone()]).unwrap();
        assert_eq!(read_labeled(&text).unwrap(), vec![l]);
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let mut a = raw(vec![1.0 / 3.0, 0.1 + 0.2, 0.3]);
        a.env_id = 9;
        let b = raw(vec![7.0, 7.0, 6.5]);
        let text = write_raw(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_raw(&text).unwrap(), vec![a, b]);
        assert!(read_raw(&text.replace(",6.5", ",8")).is_err());
    }

    #[test]
    fn reader_rejects_decreasing_profiles() {
        let text = "#metastop-profiles v1 Q=30 T=2\n0,0,10,5,0,4,3\n";
        assert!(read_profiles(text).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_scale_invariant(
            worst in 10.0f64..1000.0,
            frac in proptest::collection::vec(0.0f64..1.0, 1..20),
            opt_frac in 0.05f64..0.95,
            c in 0.001f64..1000.0,
        ) {
            let optimal = worst * opt_frac;
            let mut lens: Vec<f64> = frac.iter().map(|f| optimal * 0.8 + (worst - optimal * 0.8) * f).collect();
            lens.sort_by(|a, b| b.total_cmp(a));
            lens.insert(0, worst);
            let a = normalize(&raw(lens.clone()), optimal, 30).unwrap();
            let scaled: Vec<f64> = lens.iter().map(|l| l * c).collect();
            let b = normalize(&raw(scaled), optimal * c, 30).unwrap();
            prop_assert_eq!(&a.q, &b.q);
            prop_assert!(a.q.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(a.q[0], 0);
        }

        #[test]
        fn oracle_stop_maximizes_utility(
            inc in proptest::collection::vec(0usize..3, 1..60),
            w in 0.0f64..=1.0,
        ) {
            let mut q = vec![0usize];
            for d in inc { let n = (q[q.len() - 1] + d).min(30); q.push(n); }
            let p = profile(q, 30);
            let spec = UtilitySpec::new(w).unwrap();
            let l = oracle_actions(&p, spec);
            let u = p.utilities(spec);
            prop_assert!(u.iter().all(|&x| u[l.stop_step] >= x));
            let switch = l.actions.iter().position(|&a| a == Action::Stop).unwrap();
            prop_assert_eq!(switch, l.stop_step);
            prop_assert!(l.actions[switch..].iter().all(|&a| a == Action::Stop));
        }
    }
}
