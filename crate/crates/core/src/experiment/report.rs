//! CSV and Markdown tables: predictor accuracy, normalizer effect,
//! transition-model loss by feature set, and the policy comparison; plus
//! utility-versus-time plot data.

use std::fmt::Write as _;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::eval::{EvalResult, Mark};
use crate::error::{Error, Result};
use crate::profile::{NormalizedProfile, UtilitySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub environment: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerRow {
    pub environment: String,
    pub normalizer: String,
    pub avg_length: f64,
    pub mean: f64,
    pub ci: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub features: String,
    pub mean_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub planner: String,
    pub w: f64,
    pub policy: String,
    pub mean: f64,
    pub ci: f64,
    pub mark: Mark,
}

/// One row per policy of every evaluation result.
pub fn comparison_rows(planner: &str, results: &[EvalResult]) -> Vec<ComparisonRow> {
    results
        .iter()
        .flat_map(|r| {
            r.policies.iter().map(move |p| ComparisonRow {
                planner: planner.to_string(),
                w: r.w,
                policy: p.policy.clone(),
                mean: p.mean,
                ci: p.ci,
                mark: p.mark,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Table {
    Accuracy(Vec<AccuracyRow>),
    Normalizers(Vec<NormalizerRow>),
    Transition(Vec<TransitionRow>),
    Comparison(Vec<ComparisonRow>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

pub fn report(table: &Table, format: Format) -> Result<String> {
    match format {
        Format::Csv => match table {
            Table::Accuracy(r) => to_csv(r),
            Table::Normalizers(r) => to_csv(r),
            Table::Transition(r) => to_csv(r),
            Table::Comparison(r) => to_csv(r),
        },
        Format::Markdown => Ok(match table {
            Table::Accuracy(r) => accuracy_md(r),
            Table::Normalizers(r) => normalizers_md(r),
            Table::Transition(r) => transition_md(r),
            Table::Comparison(r) => comparison_md(r),
        }),
    }
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Parse(format!("csv: {e}"))
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)
}

pub fn parse_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

/// Display name of a policy column.
pub fn policy_title(name: &str) -> &str {
    match name {
        "oracle" => "Oracle",
        "model_based" => "Model-based",
        "classification" => "Classification",
        "rnn" => "RNN",
        "fixed_time" => "Fixed time",
        "fixed_quality" => "Fixed quality",
        other => other,
    }
}

fn normalizer_title(name: &str) -> &str {
    match name {
        "ground_truth" => "Ground truth",
        "cnn" => "CNN",
        "straight_line" => "Straight line",
        other => other,
    }
}

/// Distinct values in order of first appearance.
fn distinct<'a>(it: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in it {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn accuracy_md(rows: &[AccuracyRow]) -> String {
    let mut s = String::from("| Environment type |");
    for r in rows {
        write!(s, " {} |", r.environment).unwrap();
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(rows.len()));
    s.push_str("\n| Accuracy |");
    for r in rows {
        write!(s, " {:.2}% |", r.accuracy).unwrap();
    }
    s.push('\n');
    s
}

fn normalizers_md(rows: &[NormalizerRow]) -> String {
    let envs = distinct(rows.iter().map(|r| r.environment.as_str()));
    let norms = distinct(rows.iter().map(|r| r.normalizer.as_str()));
    let mut s = String::from("| Environment type |");
    for n in &norms {
        write!(s, " Avg. length: {} |", normalizer_title(n)).unwrap();
    }
    for n in &norms {
        write!(s, " Utility: {} |", normalizer_title(n)).unwrap();
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(2 * norms.len()));
    s.push('\n');
    for e in envs {
        write!(s, "| {e} |").unwrap();
        let find = |n: &str| rows.iter().find(|r| r.environment == e && r.normalizer == n);
        for n in &norms {
            match find(n) {
                Some(r) => write!(s, " {:.2} |", r.avg_length).unwrap(),
                None => s.push_str(" - |"),
            }
        }
        for n in &norms {
            match find(n) {
                Some(r) => write!(s, " {:.3}±{:.3} |", r.mean, r.ci).unwrap(),
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

fn transition_md(rows: &[TransitionRow]) -> String {
    let mut s = String::from("| Features |");
    for r in rows {
        let f = if r.features == "{}" { "No features".to_string() } else { r.features.replace(',', ", ") };
        write!(s, " {f} |").unwrap();
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(rows.len()));
    s.push_str("\n| Loss |");
    for r in rows {
        write!(s, " {:.3} |", r.mean_nll).unwrap();
    }
    s.push('\n');
    s
}

fn comparison_md(rows: &[ComparisonRow]) -> String {
    let policies = distinct(rows.iter().map(|r| r.policy.as_str()));
    let mut s = String::from("| Anytime planner | w |");
    for p in &policies {
        write!(s, " {} Mean | {} CI |", policy_title(p), policy_title(p)).unwrap();
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|---|".repeat(policies.len()));
    s.push('\n');
    let mut groups: Vec<(&str, f64)> = Vec::new();
    for r in rows {
        if !groups.iter().any(|g| g.0 == r.planner && g.1 == r.w) {
            groups.push((&r.planner, r.w));
        }
    }
    for (planner, w) in groups {
        write!(s, "| {planner} | {w} |").unwrap();
        for p in &policies {
            match rows.iter().find(|r| r.planner == planner && r.w == w && r.policy == *p) {
                Some(r) => {
                    let star = if r.mark == Mark::Best { "*" } else { "" };
                    let (b0, b1) = if r.mark == Mark::None { ("", "") } else { ("**", "**") };
                    write!(s, " {b0}{:.3}{b1}{star} | {b0}{:.3}{b1}{star} |", r.mean, r.ci).unwrap();
                }
                None => s.push_str(" - | - |"),
            }
        }
        s.push('\n');
    }
    s
}

/// Utility-versus-time data: `T+1` rows per profile.
pub fn profile_plot_csv(profiles: &[NormalizedProfile], spec: UtilitySpec) -> String {
    let mut s = String::from("env_id,run_id,step,t,q,utility\n");
    for p in profiles {
        for i in 0..=p.t_steps {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                p.env_id,
                p.run_id,
                i,
                i as f64 / p.t_steps as f64,
                p.q[i],
                p.utility_at(i, spec)
            )
            .unwrap();
        }
    }
    s
}
