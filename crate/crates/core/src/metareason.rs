//! Stopping policies for anytime planning: a fitted transition model solved
//! by backward induction, an MLP classifier and a recurrent sequence labeler
//! imitating hindsight-optimal labels, and fixed-time / fixed-quality /
//! oracle baselines, all behind [`decide`].

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Loss, NeuralModel, Sample, Tensor, TrainConfig};
use crate::profile::{features_of_history, utility, Action, LabeledProfile, NormalizedProfile, UtilitySpec};

/// Cap on the flatness feature in discrete states.
pub const F_MAX: usize = 10;
/// Classifier hidden widths.
pub const CLASSIFIER_HIDDEN: [usize; 3] = [128, 64, 32];
/// Default recurrent hidden width at desk scale.
pub const RNN_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureSet {
    pub t: bool,
    pub q: bool,
    pub q_prev: bool,
    pub slope: bool,
    pub flatness: bool,
}

impl FeatureSet {
    pub const EMPTY: FeatureSet = FeatureSet { t: false, q: false, q_prev: false, slope: false, flatness: false };

    /// `(t, q, q_prev)`, the default conditioning of the transition model.
    pub fn model_based() -> Self {
        FeatureSet { t: true, q: true, q_prev: true, ..Self::EMPTY }
    }

    pub fn all() -> Self {
        FeatureSet { t: true, q: true, q_prev: true, slope: true, flatness: true }
    }

    pub fn names(&self) -> Vec<&'static str> {
        [
            (self.t, "t"),
            (self.q, "q"),
            (self.q_prev, "q_prev"),
            (self.slope, "slope"),
            (self.flatness, "flatness"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect()
    }

    fn tracks_prev(&self) -> bool {
        self.q_prev || self.slope
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.names();
        if n.is_empty() {
            f.write_str("{}")
        } else {
            f.write_str(&n.join(","))
        }
    }
}

impl FromStr for FeatureSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut fs = FeatureSet::EMPTY;
        let s = s.trim().trim_start_matches('{').trim_end_matches('}');
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty() && *t != "none") {
            match tok {
                "t" => fs.t = true,
                "q" => fs.q = true,
                "q_prev" => fs.q_prev = true,
                "slope" => fs.slope = true,
                "flatness" => fs.flatness = true,
                _ => return Err(Error::InvalidInput(format!("unknown feature '{tok}'"))),
            }
        }
        Ok(fs)
    }
}

impl TryFrom<String> for FeatureSet {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FeatureSet> for String {
    fn from(fs: FeatureSet) -> String {
        fs.to_string()
    }
}

/// Step index, current and previous level, and capped flatness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiscreteState {
    pub i: usize,
    pub q: usize,
    pub q_prev: usize,
    pub flatness: usize,
}

impl DiscreteState {
    pub fn from_history(history: &[usize]) -> Self {
        let i = history.len() - 1;
        let q = history[i];
        let q_prev = if i == 0 { q } else { history[i - 1] };
        let flatness = history[..i].iter().rev().take_while(|&&v| v == q).take(F_MAX).count();
        Self { i, q, q_prev, flatness }
    }

    /// State after one transition to level `next`.
    pub fn advance(&self, next: usize) -> Self {
        Self {
            i: self.i + 1,
            q: next,
            q_prev: self.q,
            flatness: if next == self.q { (self.flatness + 1).min(F_MAX) } else { 0 },
        }
    }
}

type Key = [u32; 5];

/// Categorical next-quality model conditioned on a feature tuple. With `q`
/// in the feature set the outcome is the level increment `0..=Q−q`;
/// otherwise the outcome is the next level `0..=Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub q_levels: usize,
    pub t_steps: usize,
    pub features: FeatureSet,
    pub alpha: f64,
    counts: BTreeMap<Key, Vec<u64>>,
}

impl TransitionModel {
    pub fn new(q_levels: usize, t_steps: usize, features: FeatureSet, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || q_levels == 0 || t_steps == 0 {
            return Err(Error::InvalidInput(format!("alpha {alpha}, Q {q_levels}, T {t_steps}")));
        }
        Ok(Self { q_levels, t_steps, features, alpha, counts: BTreeMap::new() })
    }

    fn key(&self, s: &DiscreteState) -> Key {
        let fs = self.features;
        [
            if fs.t { s.i as u32 } else { 0 },
            if fs.q { s.q as u32 } else { 0 },
            if fs.q_prev { s.q_prev as u32 } else { 0 },
            if fs.slope { (s.q - s.q_prev) as u32 } else { 0 },
            if fs.flatness { s.flatness as u32 } else { 0 },
        ]
    }

    /// Number of outcomes in the row conditioned on `s`.
    pub fn support(&self, s: &DiscreteState) -> usize {
        if self.features.q {
            self.q_levels - s.q + 1
        } else {
            self.q_levels + 1
        }
    }

    fn outcome(&self, s: &DiscreteState, next: usize) -> usize {
        if self.features.q {
            next - s.q
        } else {
            next
        }
    }

    /// Adds `n` observations of a transition from `s` to level `next`.
    pub fn add_count(&mut self, s: &DiscreteState, next: usize, n: u64) -> Result<()> {
        if s.q > self.q_levels || next > self.q_levels || next < s.q || s.i >= self.t_steps {
            return Err(Error::StateOutOfRange(format!("{s:?} -> {next}")));
        }
        let support = self.support(s);
        let o = self.outcome(s, next);
        let row = self.counts.entry(self.key(s)).or_insert_with(|| vec![0; support]);
        row[o] += n;
        Ok(())
    }

    /// Smoothed outcome probabilities for the row of `s`; unseen rows are
    /// uniform.
    pub fn row(&self, s: &DiscreteState) -> Vec<f64> {
        let support = self.support(s);
        match self.counts.get(&self.key(s)) {
            Some(c) if c.iter().sum::<u64>() > 0 || self.alpha > 0.0 => {
                let total = c.iter().sum::<u64>() as f64 + self.alpha * support as f64;
                c.iter().map(|&k| (k as f64 + self.alpha) / total).collect()
            }
            _ => vec![1.0 / support as f64; support],
        }
    }

    /// Distribution over the next level, restricted to levels `≥ s.q`.
    pub fn next_level_probs(&self, s: &DiscreteState) -> Vec<(usize, f64)> {
        let row = self.row(s);
        if self.features.q {
            return row.into_iter().enumerate().map(|(k, p)| (s.q + k, p)).collect();
        }
        let mass: f64 = row[s.q..].iter().sum();
        if mass > 0.0 {
            (s.q..=self.q_levels).map(|l| (l, row[l] / mass)).collect()
        } else {
            let u = 1.0 / (self.q_levels - s.q + 1) as f64;
            (s.q..=self.q_levels).map(|l| (l, u)).collect()
        }
    }

    /// Probability the model assigns to the observed outcome `s → next`.
    pub fn prob(&self, s: &DiscreteState, next: usize) -> f64 {
        self.row(s)[self.outcome(s, next)]
    }

    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    const MAGIC: &'static str = "#metastop-transition v1";

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "{} Q={} T={} alpha={} features={}\n",
            Self::MAGIC,
            self.q_levels,
            self.t_steps,
            self.alpha,
            self.features
        );
        let names = ["t", "q", "q_prev", "slope", "flatness"];
        let on = self.on_mask();
        for (n, _) in names.iter().zip(on).filter(|(_, o)| *o) {
            write!(out, "{n},").unwrap();
        }
        out.push_str(if self.features.q { "increment,count\n" } else { "next_level,count\n" });
        for (key, row) in &self.counts {
            for (o, &c) in row.iter().enumerate().filter(|(_, &c)| c > 0) {
                for (v, _) in key.iter().zip(on).filter(|(_, o)| *o) {
                    write!(out, "{v},").unwrap();
                }
                writeln!(out, "{o},{c}").unwrap();
            }
        }
        out
    }

    fn on_mask(&self) -> [bool; 5] {
        let f = self.features;
        [f.t, f.q, f.q_prev, f.slope, f.flatness]
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| Error::Parse("empty transition file".into()))?;
        let rest = head
            .strip_prefix(Self::MAGIC)
            .ok_or_else(|| Error::Parse(format!("bad transition header '{head}'")))?;
        let mut q = None;
        let mut t = None;
        let mut alpha = None;
        let mut fs = None;
        for tok in rest.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse(format!("bad header token '{tok}'")))?;
            match k {
                "Q" => q = v.parse().ok(),
                "T" => t = v.parse().ok(),
                "alpha" => alpha = v.parse().ok(),
                "features" => fs = Some(v.parse::<FeatureSet>()?),
                _ => {}
            }
        }
        let (Some(q), Some(t), Some(alpha), Some(fs)) = (q, t, alpha, fs) else {
            return Err(Error::Parse("transition header lacks Q, T, alpha or features".into()));
        };
        let mut model = Self::new(q, t, fs, alpha)?;
        lines.next().ok_or_else(|| Error::Parse("missing column header".into()))?;
        let on = model.on_mask();
        let width = on.iter().filter(|o| **o).count();
        for line in lines {
            let vals: Vec<u64> = line
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Parse(format!("bad row '{line}'"))))
                .collect::<Result<_>>()?;
            if vals.len() != width + 2 {
                return Err(Error::Parse(format!("bad row '{line}'")));
            }
            let mut key = [0u32; 5];
            let mut it = vals[..width].iter();
            for (slot, _) in key.iter_mut().zip(on).filter(|(_, o)| *o) {
                *slot = *it.next().unwrap() as u32;
            }
            let support = if fs.q { q - key[1] as usize + 1 } else { q + 1 };
            let o = vals[width] as usize;
            if o >= support || (fs.q && key[1] as usize > q) {
                return Err(Error::Parse(format!("outcome out of range in '{line}'")));
            }
            model.counts.entry(key).or_insert_with(|| vec![0; support])[o] += vals[width + 1];
        }
        Ok(model)
    }
}

fn check_dims<'a>(mut it: impl Iterator<Item = &'a NormalizedProfile>) -> Result<(usize, usize)> {
    let first = it.next().ok_or(Error::EmptyDataset)?;
    let d = (first.q_levels, first.t_steps);
    if it.any(|p| (p.q_levels, p.t_steps) != d) {
        return Err(Error::InvalidInput("profiles disagree on Q or T".into()));
    }
    Ok(d)
}

/// Counts every consecutive step pair of every profile.
pub fn fit_transition(train: &[NormalizedProfile], fs: FeatureSet, alpha: f64) -> Result<TransitionModel> {
    let (q_levels, t_steps) = check_dims(train.iter())?;
    let mut m = TransitionModel::new(q_levels, t_steps, fs, alpha)?;
    for p in train {
        let mut s = DiscreteState::from_history(&p.q[..1]);
        for i in 0..t_steps {
            let next = p.q[i + 1];
            m.add_count(&s, next, 1)?;
            s = s.advance(next);
        }
    }
    Ok(m)
}

/// Total and per-transition mean negative log-likelihood of held-out
/// transitions.
pub fn transition_nll(model: &TransitionModel, test: &[NormalizedProfile]) -> (f64, f64) {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in test {
        let mut s = DiscreteState::from_history(&p.q[..1]);
        for i in 0..p.t_steps.min(model.t_steps) {
            let next = p.q[i + 1];
            total -= model.prob(&s, next).ln();
            n += 1;
            s = s.advance(next);
        }
    }
    (total, if n > 0 { total / n as f64 } else { 0.0 })
}

/// Value table and stop set from backward induction.
#[derive(Debug, Clone, PartialEq)]
pub struct DpPolicy {
    pub model: TransitionModel,
    prev_dim: usize,
    flat_dim: usize,
    values: Vec<f64>,
    stop: Vec<bool>,
}

impl DpPolicy {
    fn index(&self, s: &DiscreteState) -> usize {
        let q1 = self.model.q_levels + 1;
        let qp = if self.prev_dim > 1 { s.q_prev } else { 0 };
        let f = if self.flat_dim > 1 { s.flatness } else { 0 };
        ((s.i * q1 + s.q) * self.prev_dim + qp) * self.flat_dim + f
    }

    fn check(&self, s: &DiscreteState) -> Result<()> {
        if s.i > self.model.t_steps || s.q > self.model.q_levels || s.q_prev > s.q || s.flatness > F_MAX {
            return Err(Error::StateOutOfRange(format!("{s:?}")));
        }
        Ok(())
    }

    pub fn value(&self, s: &DiscreteState) -> Result<f64> {
        self.check(s)?;
        Ok(self.values[self.index(s)])
    }

    pub fn stops(&self, s: &DiscreteState) -> Result<bool> {
        self.check(s)?;
        Ok(self.stop[self.index(s)])
    }
}

/// Undiscounted backward induction: `V_T = U(q, 1)`,
/// `V_i = max(U(q, i/T), E[V_{i+1}])`, stopping on ties.
pub fn solve_dp(model: &TransitionModel, spec: UtilitySpec) -> Result<StoppingPolicy> {
    if !model.features.t {
        return Err(Error::InvalidInput("model-based conditioning must include t".into()));
    }
    let (q_levels, t_steps) = (model.q_levels, model.t_steps);
    let prev_dim = if model.features.tracks_prev() { q_levels + 1 } else { 1 };
    let flat_dim = if model.features.flatness { F_MAX + 1 } else { 1 };
    let n = (t_steps + 1) * (q_levels + 1) * prev_dim * flat_dim;
    let mut dp = DpPolicy {
        model: model.clone(),
        prev_dim,
        flat_dim,
        values: vec![f64::NEG_INFINITY; n],
        stop: vec![true; n],
    };
    let states_at = |i: usize| {
        (0..=q_levels).flat_map(move |q| {
            let prevs = if prev_dim > 1 { 0..=q } else { q..=q };
            prevs.flat_map(move |qp| {
                let flats = if flat_dim > 1 && qp == q { 0..=F_MAX } else { 0..=0 };
                flats.map(move |f| DiscreteState { i, q, q_prev: qp, flatness: f })
            })
        })
    };
    for s in states_at(t_steps) {
        let idx = dp.index(&s);
        dp.values[idx] = utility(s.q, t_steps, spec, q_levels, t_steps);
    }
    for i in (0..t_steps).rev() {
        for s in states_at(i) {
            let cont: f64 = model
                .next_level_probs(&s)
                .into_iter()
                .map(|(next, p)| p * dp.values[dp.index(&s.advance(next))])
                .sum();
            let now = utility(s.q, i, spec, q_levels, t_steps);
            let idx = dp.index(&s);
            dp.stop[idx] = now >= cont;
            dp.values[idx] = now.max(cont);
        }
    }
    Ok(StoppingPolicy { q_levels, t_steps, w: spec.w, kind: PolicyKind::Dp(Box::new(dp)) })
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    Dp(Box<DpPolicy>),
    Mlp { model: NeuralModel, features: FeatureSet },
    Rnn { model: NeuralModel },
    FixedTime { step: usize },
    FixedQuality { level: usize },
    /// Replays a single profile's hindsight-optimal stop.
    Oracle { stop_step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingPolicy {
    pub q_levels: usize,
    pub t_steps: usize,
    /// Utility weight the policy was fit for.
    pub w: f64,
    pub kind: PolicyKind,
}

impl StoppingPolicy {
    pub fn name(&self) -> &'static str {
        match self.kind {
            PolicyKind::Dp(_) => "model_based",
            PolicyKind::Mlp { .. } => "classification",
            PolicyKind::Rnn { .. } => "rnn",
            PolicyKind::FixedTime { .. } => "fixed_time",
            PolicyKind::FixedQuality { .. } => "fixed_quality",
            PolicyKind::Oracle { .. } => "oracle",
        }
    }

    pub fn oracle(label: &LabeledProfile) -> Self {
        Self {
            q_levels: label.profile.q_levels,
            t_steps: label.profile.t_steps,
            w: label.w,
            kind: PolicyKind::Oracle { stop_step: label.stop_step },
        }
    }

    const MAGIC: &'static str = "#metastop-policy v1";

    /// Text form: fixed and oracle policies are one line; neural policies
    /// embed a model checkpoint; the DP policy embeds its transition model
    /// and is re-solved on load.
    pub fn to_text(&self) -> String {
        let head = format!("{} Q={} T={} w={}", Self::MAGIC, self.q_levels, self.t_steps, self.w);
        match &self.kind {
            PolicyKind::FixedTime { step } => format!("{head} fixed_time step={step}\n"),
            PolicyKind::FixedQuality { level } => format!("{head} fixed_quality level={level}\n"),
            PolicyKind::Oracle { stop_step } => format!("{head} oracle stop_step={stop_step}\n"),
            PolicyKind::Dp(dp) => format!("{head} dp\n{}", dp.model.to_csv()),
            PolicyKind::Mlp { model, features } => {
                format!("{head} mlp features={features}\n{}", model.to_checkpoint())
            }
            PolicyKind::Rnn { model } => format!("{head} rnn\n{}", model.to_checkpoint()),
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (head, body) = text.split_once('\n').unwrap_or((text, ""));
        let rest = head
            .strip_prefix(Self::MAGIC)
            .ok_or_else(|| Error::Parse("missing policy header".into()))?;
        let mut kv = BTreeMap::new();
        let mut kind = None;
        for tok in rest.split_whitespace() {
            match tok.split_once('=') {
                Some((k, v)) => {
                    kv.insert(k, v);
                }
                None => kind = Some(tok),
            }
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k).copied().ok_or_else(|| Error::Parse(format!("policy header lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Parse(format!("bad {k}"))) };
        let q_levels = num("Q")?;
        let t_steps = num("T")?;
        let w: f64 = get("w")?.parse().map_err(|_| Error::Parse("bad w".into()))?;
        let kind = match kind {
            Some("fixed_time") => PolicyKind::FixedTime { step: num("step")? },
            Some("fixed_quality") => PolicyKind::FixedQuality { level: num("level")? },
            Some("oracle") => PolicyKind::Oracle { stop_step: num("stop_step")? },
            Some("dp") => return solve_dp(&TransitionModel::from_csv(body)?, UtilitySpec::new(w)?),
            Some("mlp") => PolicyKind::Mlp {
                model: NeuralModel::from_checkpoint(body)?,
                features: get("features")?.parse()?,
            },
            Some("rnn") => PolicyKind::Rnn { model: NeuralModel::from_checkpoint(body)? },
            other => return Err(Error::Parse(format!("unknown policy kind {other:?}"))),
        };
        Ok(Self { q_levels, t_steps, w, kind })
    }
}

fn check_history(p: &StoppingPolicy, history: &[usize], i: usize) -> Result<()> {
    if history.len() != i + 1 {
        return Err(Error::StateOutOfRange(format!("history of length {} at step {i}", history.len())));
    }
    if i > p.t_steps {
        return Err(Error::StateOutOfRange(format!("step {i} beyond T={}", p.t_steps)));
    }
    if history.iter().any(|&q| q > p.q_levels) || history.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::StateOutOfRange("levels out of range or decreasing".into()));
    }
    Ok(())
}

/// Classifier input vector: `t`, `q/Q`, `q_prev/Q`, slope and flatness
/// scaled by `1/T`, restricted to `fs`.
pub fn classifier_input(history: &[usize], fs: FeatureSet, q_levels: usize, t_steps: usize) -> Vec<f64> {
    let f = features_of_history(history, q_levels, t_steps);
    let mut v = Vec::with_capacity(5);
    if fs.t {
        v.push(f.t);
    }
    if fs.q {
        v.push(f.q_now as f64 / q_levels as f64);
    }
    if fs.q_prev {
        v.push(f.q_prev as f64 / q_levels as f64);
    }
    if fs.slope {
        v.push(f.slope / t_steps as f64);
    }
    if fs.flatness {
        v.push(f.flatness as f64 / t_steps as f64);
    }
    v
}

fn rnn_input(history: &[usize], w: f64, q_levels: usize, t_steps: usize) -> Tensor {
    let spec = UtilitySpec { w };
    let u: Vec<f64> = history.iter().enumerate().map(|(i, &q)| utility(q, i, spec, q_levels, t_steps)).collect();
    Tensor::new(vec![u.len(), 1], u).expect("sequence shape")
}

fn class_action(logits: &[f64]) -> Action {
    if nn::argmax(logits) == 1 {
        Action::Stop
    } else {
        Action::Continue
    }
}

/// Action at step `i` given the quality history `q_0..=q_i`. Step `T` always
/// stops.
pub fn decide(policy: &StoppingPolicy, history: &[usize], i: usize) -> Result<Action> {
    check_history(policy, history, i)?;
    if i == policy.t_steps {
        return Ok(Action::Stop);
    }
    let stop = match &policy.kind {
        PolicyKind::Dp(dp) => dp.stops(&DiscreteState::from_history(history))?,
        PolicyKind::Mlp { model, features } => {
            let x = classifier_input(history, *features, policy.q_levels, policy.t_steps);
            class_action(model.forward(&Tensor::vector(x))?.data()) == Action::Stop
        }
        PolicyKind::Rnn { model } => {
            let out = model.forward(&rnn_input(history, policy.w, policy.q_levels, policy.t_steps))?;
            class_action(&out.data()[i * 2..i * 2 + 2]) == Action::Stop
        }
        PolicyKind::FixedTime { step } => i >= *step,
        PolicyKind::FixedQuality { level } => history[i] >= *level,
        PolicyKind::Oracle { stop_step } => i >= *stop_step,
    };
    Ok(if stop { Action::Stop } else { Action::Continue })
}

/// First step at which `policy` stops on the full profile `q`. Equivalent to
/// calling [`decide`] on every prefix; the recurrent policy is evaluated in
/// one pass since its outputs are causal.
pub fn first_stop(policy: &StoppingPolicy, q: &[usize]) -> Result<usize> {
    if q.len() != policy.t_steps + 1 {
        return Err(Error::StateOutOfRange(format!("profile of length {} for T={}", q.len(), policy.t_steps)));
    }
    if let PolicyKind::Rnn { model } = &policy.kind {
        check_history(policy, q, policy.t_steps)?;
        let out = model.forward(&rnn_input(q, policy.w, policy.q_levels, policy.t_steps))?;
        let d = out.data();
        return Ok((0..policy.t_steps)
            .find(|&i| class_action(&d[i * 2..i * 2 + 2]) == Action::Stop)
            .unwrap_or(policy.t_steps));
    }
    for i in 0..=policy.t_steps {
        if decide(policy, &q[..=i], i)? == Action::Stop {
            return Ok(i);
        }
    }
    unreachable!("step T always stops")
}

fn check_labels(labeled: &[LabeledProfile]) -> Result<(usize, usize, f64)> {
    let (q_levels, t_steps) = check_dims(labeled.iter().map(|l| &l.profile))?;
    let w = labeled[0].w;
    if labeled.iter().any(|l| l.w != w) {
        return Err(Error::InvalidInput("labels were computed for different w".into()));
    }
    Ok((q_levels, t_steps, w))
}

fn action_class(a: Action) -> f64 {
    match a {
        Action::Continue => 0.0,
        Action::Stop => 1.0,
    }
}

/// Per-step training pairs `(features_at(p, i), a*_i)`.
pub fn classifier_samples(labeled: &[LabeledProfile], fs: FeatureSet) -> Vec<Sample> {
    labeled
        .iter()
        .flat_map(|l| {
            let p = &l.profile;
            (0..=p.t_steps).map(move |i| Sample {
                input: Tensor::vector(classifier_input(&p.q[..=i], fs, p.q_levels, p.t_steps)),
                target: Tensor::scalar(action_class(l.actions[i])),
            })
        })
        .collect()
}

pub fn train_classifier(labeled: &[LabeledProfile], fs: FeatureSet, cfg: &TrainConfig) -> Result<StoppingPolicy> {
    train_classifier_with(labeled, fs, &CLASSIFIER_HIDDEN, cfg)
}

pub fn train_classifier_with(
    labeled: &[LabeledProfile],
    fs: FeatureSet,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<StoppingPolicy> {
    let (q_levels, t_steps, w) = check_labels(labeled)?;
    if fs == FeatureSet::EMPTY {
        return Err(Error::InvalidInput("classifier needs at least one feature".into()));
    }
    let data = classifier_samples(labeled, fs);
    let init = NeuralModel::mlp(fs.names().len(), hidden, 2, crate::seed::derive_seed(cfg.seed, "mlp-init", 0))?;
    let mut cfg = cfg.clone();
    cfg.loss = Loss::SoftmaxCrossEntropy;
    let model = nn::train(&init, &data, &cfg)?;
    Ok(StoppingPolicy { q_levels, t_steps, w, kind: PolicyKind::Mlp { model, features: fs } })
}

/// One sequence per profile: utilities in, per-step actions out.
pub fn rnn_samples(labeled: &[LabeledProfile]) -> Vec<Sample> {
    labeled
        .iter()
        .map(|l| {
            let p = &l.profile;
            Sample {
                input: rnn_input(&p.q, l.w, p.q_levels, p.t_steps),
                target: Tensor::vector(l.actions.iter().map(|&a| action_class(a)).collect()),
            }
        })
        .collect()
}

pub fn train_rnn(labeled: &[LabeledProfile], cfg: &TrainConfig) -> Result<StoppingPolicy> {
    train_rnn_with(labeled, RNN_HIDDEN, cfg)
}

pub fn train_rnn_with(labeled: &[LabeledProfile], hidden: usize, cfg: &TrainConfig) -> Result<StoppingPolicy> {
    let (q_levels, t_steps, w) = check_labels(labeled)?;
    let data = rnn_samples(labeled);
    let init = NeuralModel::rnn(1, hidden, crate::seed::derive_seed(cfg.seed, "rnn-init", 0))?;
    let mut cfg = cfg.clone();
    cfg.loss = Loss::SoftmaxCrossEntropy;
    let model = nn::train(&init, &data, &cfg)?;
    Ok(StoppingPolicy { q_levels, t_steps, w, kind: PolicyKind::Rnn { model } })
}

/// Stops at the rounded mean oracle stop step.
pub fn fit_fixed_time(labeled: &[LabeledProfile]) -> Result<StoppingPolicy> {
    let (q_levels, t_steps, w) = check_labels(labeled)?;
    let mean = labeled.iter().map(|l| l.stop_step as f64).sum::<f64>() / labeled.len() as f64;
    Ok(StoppingPolicy { q_levels, t_steps, w, kind: PolicyKind::FixedTime { step: mean.round() as usize } })
}

/// Stops once the level reaches the rounded mean level at the oracle stop.
pub fn fit_fixed_quality(labeled: &[LabeledProfile]) -> Result<StoppingPolicy> {
    let (q_levels, t_steps, w) = check_labels(labeled)?;
    let mean = labeled.iter().map(|l| l.profile.q[l.stop_step] as f64).sum::<f64>() / labeled.len() as f64;
    Ok(StoppingPolicy { q_levels, t_steps, w, kind: PolicyKind::FixedQuality { level: mean.round() as usize } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::oracle_actions;
    use rand::Rng as _;

    fn profile(q: Vec<usize>, q_levels: usize) -> NormalizedProfile {
        NormalizedProfile {
            env_id: 0,
            run_id: 0,
            worst_length: 2.0,
            optimal_length_used: 1.0,
            t_steps: q.len() - 1,
            q,
            q_levels,
        }
    }

    fn st(i: usize, q: usize) -> DiscreteState {
        DiscreteState { i, q, q_prev: q, flatness: 0 }
    }

    #[test]
    fn feature_set_parsing() {
        assert_eq!("{}".parse::<FeatureSet>().unwrap(), FeatureSet::EMPTY);
        assert_eq!("t,q,q_prev".parse::<FeatureSet>().unwrap(), FeatureSet::model_based());
        assert_eq!(FeatureSet::all().to_string(), "t,q,q_prev,slope,flatness");
        assert!("t,speed".parse::<FeatureSet>().is_err());
    }

    #[test]
    fn empty_model_is_uniform() {
        let m = TransitionModel::new(30, 200, FeatureSet::model_based(), 1.0).unwrap();
        let row = m.row(&st(0, 0));
        assert_eq!(row.len(), 31);
        assert!(row.iter().all(|&p| (p - 1.0 / 31.0).abs() < 1e-15));
        let m0 = TransitionModel::new(30, 200, FeatureSet::model_based(), 0.0).unwrap();
        assert_eq!(m0.row(&st(5, 10)).len(), 21);
        assert!((m0.row(&st(5, 10))[3] - 1.0 / 21.0).abs() < 1e-15);
    }

    #[test]
    fn unit_steps_give_certain_increment() {
        let data: Vec<_> = (0..3).map(|k| profile((k..k + 5).collect(), 10)).collect();
        let m = fit_transition(&data, FeatureSet { t: true, q: true, ..FeatureSet::EMPTY }, 0.0).unwrap();
        for p in &data {
            for i in 0..4 {
                let row = m.row(&st(i, p.q[i]));
                assert_eq!(row[1], 1.0);
                assert_eq!(row.iter().sum::<f64>(), 1.0);
            }
        }
        let (total, mean) = transition_nll(&m, &data);
        assert_eq!((total, mean), (0.0, 0.0));
    }

    #[test]
    fn uniform_two_way_nll() {
        // Q = 1 from level 0: two increments, no data, alpha 1
        let m = TransitionModel::new(1, 10, FeatureSet { t: true, q: true, ..FeatureSet::EMPTY }, 1.0).unwrap();
        let p = profile(vec![0; 11], 1);
        let (total, _) = transition_nll(&m, &[p]);
        assert!((total - 10.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let mut g = crate::seed::rng(3);
        let data: Vec<_> = (0..20)
            .map(|_| {
                let mut q = vec![0usize];
                for _ in 0..15 {
                    let n = (q[q.len() - 1] + g.random_range(0..3)).min(8);
                    q.push(n);
                }
                profile(q, 8)
            })
            .collect();
        for fs in ["{}", "t", "t,q", "t,q,q_prev", "t,q,slope,flatness"] {
            let m = fit_transition(&data, fs.parse().unwrap(), 0.5).unwrap();
            assert_eq!(TransitionModel::from_csv(&m.to_csv()).unwrap(), m, "{fs}");
        }
    }

    #[test]
    fn no_improvement_stops_immediately() {
        let data = vec![profile(vec![3; 21], 10); 4];
        let m = fit_transition(&data, FeatureSet::model_based(), 0.0).unwrap();
        let p = solve_dp(&m, UtilitySpec::new(0.7).unwrap()).unwrap();
        for i in 0..=20 {
            assert_eq!(decide(&p, &vec![3; i + 1], i).unwrap(), Action::Stop);
        }
    }

    #[test]
    fn deterministic_climb_continues_to_top() {
        let (q, t) = (30, 200);
        let mut m = TransitionModel::new(q, t, FeatureSet { t: true, q: true, ..FeatureSet::EMPTY }, 0.0).unwrap();
        for i in 0..t {
            for lvl in 0..q {
                m.add_count(&st(i, lvl), lvl + 1, 1).unwrap();
            }
            m.add_count(&st(i, q), q, 1).unwrap();
        }
        let p = solve_dp(&m, UtilitySpec::new(0.8).unwrap()).unwrap();
        let hist: Vec<usize> = (0..=30).collect();
        assert_eq!(first_stop(&p, &[hist.clone(), vec![30; 170]].concat()).unwrap(), 30);
        for i in 0..30 {
            assert_eq!(decide(&p, &hist[..=i], i).unwrap(), Action::Continue);
        }
    }

    #[test]
    fn dp_rejects_timeless_model() {
        let m = TransitionModel::new(3, 3, FeatureSet::EMPTY, 1.0).unwrap();
        assert!(solve_dp(&m, UtilitySpec::new(0.5).unwrap()).is_err());
    }

    #[test]
    fn fixed_baselines() {
        let mk = |stop: usize, q: Vec<usize>| {
            let mut l = oracle_actions(&profile(q, 30), UtilitySpec::new(0.8).unwrap());
            l.stop_step = stop;
            l
        };
        let a = mk(10, vec![12; 31]);
        let b = mk(20, vec![18; 31]);
        let ft = fit_fixed_time(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ft.kind, PolicyKind::FixedTime { step: 15 });
        let fq = fit_fixed_quality(&[a, b]).unwrap();
        assert_eq!(fq.kind, PolicyKind::FixedQuality { level: 15 });
        let p = StoppingPolicy { q_levels: 30, t_steps: 30, w: 0.8, kind: PolicyKind::FixedQuality { level: 20 } };
        assert_eq!(decide(&p, &[19], 0).unwrap(), Action::Continue);
        assert_eq!(decide(&p, &[19; 31], 30).unwrap(), Action::Stop);
        assert!(matches!(decide(&p, &[1, 2], 0), Err(Error::StateOutOfRange(_))));
        assert!(matches!(decide(&p, &[5, 4], 1), Err(Error::StateOutOfRange(_))));
        assert!(fit_fixed_time(&[]).is_err());
    }

    #[test]
    fn policy_text_round_trip() {
        let p = StoppingPolicy { q_levels: 30, t_steps: 200, w: 0.8, kind: PolicyKind::FixedTime { step: 7 } };
        assert_eq!(StoppingPolicy::from_text(&p.to_text()).unwrap(), p);
        let data = vec![profile(vec![0, 1, 1, 2, 3, 3], 3); 2];
        let m = fit_transition(&data, FeatureSet::model_based(), 1.0).unwrap();
        let dp = solve_dp(&m, UtilitySpec::new(0.6).unwrap()).unwrap();
        assert_eq!(StoppingPolicy::from_text(&dp.to_text()).unwrap(), dp);
        let r = StoppingPolicy {
            q_levels: 3,
            t_steps: 5,
            w: 0.6,
            kind: PolicyKind::Rnn { model: NeuralModel::rnn(1, 4, 2).unwrap() },
        };
        assert_eq!(StoppingPolicy::from_text(&r.to_text()).unwrap(), r);
    }

    #[test]
    fn first_stop_agrees_with_decide_for_rnn() {
        let r = StoppingPolicy {
            q_levels: 10,
            t_steps: 12,
            w: 0.6,
            kind: PolicyKind::Rnn { model: NeuralModel::rnn(1, 6, 5).unwrap() },
        };
        let q = vec![0, 0, 1, 3, 3, 3, 6, 6, 7, 9, 9, 10, 10];
        let by_decide = (0..=12).find(|&i| decide(&r, &q[..=i], i).unwrap() == Action::Stop).unwrap();
        assert_eq!(first_stop(&r, &q).unwrap(), by_decide);
    }
}
