use super::{above_threshold, match_events, MatchResult, Prediction};
use crate::sim::{Category, EventRecord};
use serde_json::{json, Map, Value};
use std::fmt::Write as _;

/// One experimental setup. `predictions` holds one list per test match, or
/// `None` when the arm's model is unavailable.
#[derive(Clone, Debug)]
pub struct Arm {
    pub name: String,
    /// Temporal context of a DST arm, for the context-length table.
    pub context: Option<usize>,
    pub predictions: Option<Vec<Vec<Prediction>>>,
}

#[derive(Clone, Debug)]
pub struct ArmReport {
    pub name: String,
    pub context: Option<usize>,
    /// One entry per reported δ; `None` for a missing arm.
    pub results: Vec<Option<MatchResult>>,
}

#[derive(Clone, Debug)]
pub struct TableTwoRow {
    pub context: usize,
    pub pr: f64,
    pub rec: f64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub threshold: f32,
    pub deltas: Vec<usize>,
    pub arms: Vec<ArmReport>,
}

/// Evaluate every arm against the same ground truth at each δ.
pub fn ablation_suite(
    arms: &[Arm],
    truth: &[Vec<EventRecord>],
    threshold: f32,
    deltas: &[usize],
) -> Report {
    let arms = arms
        .iter()
        .map(|arm| {
            let results = deltas
                .iter()
                .map(|&delta| {
                    let preds = arm.predictions.as_ref()?;
                    if preds.len() != truth.len() {
                        return None;
                    }
                    let mut total = MatchResult::default();
                    for (p, g) in preds.iter().zip(truth) {
                        total.merge(&match_events(&above_threshold(p, threshold), g, delta));
                    }
                    Some(total)
                })
                .collect();
            ArmReport {
                name: arm.name.clone(),
                context: arm.context,
                results,
            }
        })
        .collect();
    Report {
        threshold,
        deltas: deltas.to_vec(),
        arms,
    }
}

fn pct(v: f64) -> String {
    format!("{:5.1}", 100.0 * v)
}

impl Report {
    fn delta_index(&self, delta: usize) -> Option<usize> {
        self.deltas.iter().position(|&d| d == delta)
    }

    pub fn result(&self, arm: &str, delta: usize) -> Option<&MatchResult> {
        let i = self.delta_index(delta)?;
        self.arms.iter().find(|a| a.name == arm)?.results[i].as_ref()
    }

    /// Rows are the eight categories then the pooled overall; columns are
    /// arms, each with PR and REC in percent.
    pub fn table_one(&self, delta: usize) -> String {
        let Some(di) = self.delta_index(delta) else {
            return format!("no results for delta {delta}\n");
        };
        let mut s = String::new();
        let _ = writeln!(s, "threshold {:.2}, delta {delta} frames", self.threshold);
        let _ = write!(s, "{:<12}", "category");
        for a in &self.arms {
            let _ = write!(s, " | {:^13}", truncate(&a.name, 13));
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<12}", "");
        for _ in &self.arms {
            let _ = write!(s, " | {:>5}   {:>5}", "PR", "REC");
        }
        let _ = writeln!(s);
        let rows: Vec<(String, Option<Category>)> = Category::ALL
            .iter()
            .map(|c| (c.name().to_string(), Some(*c)))
            .chain(std::iter::once(("overall".to_string(), None)))
            .collect();
        for (label, cat) in rows {
            let _ = write!(s, "{label:<12}");
            for a in &self.arms {
                match &a.results[di] {
                    Some(r) => {
                        let c = match cat {
                            Some(c) => r.per_category[c.index()],
                            None => r.overall(),
                        };
                        let _ = write!(s, " | {}   {}", pct(c.precision()), pct(c.recall()));
                    }
                    None => {
                        let _ = write!(s, " | {:>5}   {:>5}", "-", "-");
                    }
                }
            }
            let _ = writeln!(s);
        }
        s
    }

    /// Overall PR/REC of the arms that carry a context length, by length.
    pub fn table_two_rows(&self, delta: usize) -> Vec<TableTwoRow> {
        let Some(di) = self.delta_index(delta) else {
            return Vec::new();
        };
        let mut rows: Vec<TableTwoRow> = self
            .arms
            .iter()
            .filter_map(|a| {
                let o = a.results[di].as_ref()?.overall();
                Some(TableTwoRow {
                    context: a.context?,
                    pr: o.precision(),
                    rec: o.recall(),
                })
            })
            .collect();
        rows.sort_by_key(|r| r.context);
        rows
    }

    pub fn table_two(&self, delta: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "threshold {:.2}, delta {delta} frames", self.threshold);
        let _ = writeln!(s, "{:>8} | {:>5}   {:>5}", "L", "PR", "REC");
        let rows = self.table_two_rows(delta);
        let present: Vec<usize> = rows.iter().map(|r| r.context).collect();
        for r in &rows {
            let _ = writeln!(s, "{:>8} | {}   {}", r.context, pct(r.pr), pct(r.rec));
        }
        for a in &self.arms {
            if let Some(l) = a.context {
                if !present.contains(&l) {
                    let _ = writeln!(s, "{l:>8} | {:>5}   {:>5}", "-", "-");
                }
            }
        }
        s
    }

    /// `{"delta_12": {arm: {category: {tp, fp, fn, pr, rec}}}}`, with
    /// `null` for missing arms.
    pub fn to_json(&self) -> Value {
        let mut root = Map::new();
        root.insert("threshold".into(), json!(self.threshold));
        for (di, delta) in self.deltas.iter().enumerate() {
            let mut arms = Map::new();
            for a in &self.arms {
                let v = match &a.results[di] {
                    None => Value::Null,
                    Some(r) => {
                        let mut cats = Map::new();
                        let entry = |c: &super::Counts| json!({"tp": c.tp, "fp": c.fp, "fn": c.fn_, "pr": c.precision(), "rec": c.recall()});
                        for c in Category::ALL {
                            cats.insert(c.name().into(), entry(&r.per_category[c.index()]));
                        }
                        cats.insert("overall".into(), entry(&r.overall()));
                        Value::Object(cats)
                    }
                };
                arms.insert(a.name.clone(), v);
            }
            root.insert(format!("delta_{delta}"), Value::Object(arms));
        }
        Value::Object(root)
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
