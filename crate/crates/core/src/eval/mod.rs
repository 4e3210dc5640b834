//! ±δ matching metric, the smoothing baseline and report tables.

mod report;

pub use report::{ablation_suite, Arm, ArmReport, Report, TableTwoRow};

use crate::noise::{LogitCube, CUBE_CLASSES};
use crate::sim::{in_pause, Category, EventRecord, Pause, N_CATEGORIES, N_SLOTS};
use serde::{Deserialize, Serialize};

/// One detected action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub category: Category,
    pub slot: usize,
    pub frame: usize,
    pub confidence: f32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-category counts; the overall figure pools them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub per_category: [Counts; N_CATEGORIES],
}

impl MatchResult {
    pub fn overall(&self) -> Counts {
        let mut total = Counts::default();
        for c in &self.per_category {
            total.add(c);
        }
        total
    }

    pub fn merge(&mut self, other: &MatchResult) {
        for (a, b) in self.per_category.iter_mut().zip(&other.per_category) {
            a.add(b);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub pr: f64,
    pub rec: f64,
}

/// Per-category and pooled overall (PR, REC).
pub fn precision_recall(
    result: &MatchResult,
) -> ([PrecisionRecall; N_CATEGORIES], PrecisionRecall) {
    let per = result.per_category.map(|c| PrecisionRecall {
        pr: c.precision(),
        rec: c.recall(),
    });
    let o = result.overall();
    (
        per,
        PrecisionRecall {
            pr: o.precision(),
            rec: o.recall(),
        },
    )
}

/// Maximum-cardinality one-to-one matching between two frame lists with
/// `|a - b| <= delta`, by augmenting paths.
pub fn max_matching(preds: &[usize], gts: &[usize], delta: usize) -> usize {
    let adj: Vec<Vec<usize>> = preds
        .iter()
        .map(|&p| {
            (0..gts.len())
                .filter(|&g| p.abs_diff(gts[g]) <= delta)
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gts.len()];
    let mut matched = 0;
    for p in 0..preds.len() {
        let mut seen = vec![false; gts.len()];
        if augment(p, &adj, &mut owner, &mut seen) {
            matched += 1;
        }
    }
    matched
}

fn augment(p: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &g in &adj[p] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        if owner[g].is_none_or(|q| augment(q, adj, owner, seen)) {
            owner[g] = Some(p);
            return true;
        }
    }
    false
}

/// Match within each `(slot, category)` group; matches never cross players
/// or categories.
pub fn match_events(preds: &[Prediction], gts: &[EventRecord], delta: usize) -> MatchResult {
    let mut pred_groups = vec![Vec::new(); N_SLOTS * N_CATEGORIES];
    let mut gt_groups = vec![Vec::new(); N_SLOTS * N_CATEGORIES];
    for p in preds {
        pred_groups[p.slot * N_CATEGORIES + p.category.index()].push(p.frame);
    }
    for g in gts {
        gt_groups[g.actor.slot() * N_CATEGORIES + g.category.index()].push(g.frame);
    }
    let mut result = MatchResult::default();
    for (key, (ps, gs)) in pred_groups.iter().zip(&gt_groups).enumerate() {
        if ps.is_empty() && gs.is_empty() {
            continue;
        }
        let tp = max_matching(ps, gs, delta);
        let c = &mut result.per_category[key % N_CATEGORIES];
        c.tp += tp;
        c.fp += ps.len() - tp;
        c.fn_ += gs.len() - tp;
    }
    result
}

/// Keep predictions with confidence at or above `threshold`.
pub fn above_threshold(preds: &[Prediction], threshold: f32) -> Vec<Prediction> {
    preds
        .iter()
        .filter(|p| p.confidence >= threshold)
        .copied()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Odd moving-average width in frames.
    pub window: usize,
    pub threshold: f32,
    pub nms_radius: usize,
    pub pause_filter: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            window: 9,
            threshold: 0.15,
            nms_radius: 12,
            pause_filter: true,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(format!(
                "smoothing window must be odd and positive, got {}",
                self.window
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err("threshold must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Centered moving average; windows are truncated at the ends.
pub fn moving_average(values: &[f32], window: usize) -> Vec<f32> {
    let half = window / 2;
    let n = values.len();
    let mut prefix = vec![0.0f64; n + 1];
    for (i, &v) in values.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v as f64;
    }
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(n);
            ((prefix[hi] - prefix[lo]) / (hi - lo) as f64) as f32
        })
        .collect()
}

/// Local maxima at or above `threshold`, then greedy suppression of lower
/// peaks within `radius`. Plateaus report their first frame.
pub fn pick_peaks(signal: &[f32], threshold: f32, radius: usize) -> Vec<usize> {
    let n = signal.len();
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&t| {
            let v = signal[t];
            v >= threshold && (t == 0 || v > signal[t - 1]) && (t + 1 == n || v >= signal[t + 1])
        })
        .collect();
    peaks.sort_by(|&a, &b| signal[b].total_cmp(&signal[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for p in peaks {
        if kept.iter().all(|&k| k.abs_diff(p) > radius) {
            kept.push(p);
        }
    }
    kept.sort_unstable();
    kept
}

/// Per-line softmax, temporal smoothing and peak picking on raw logits.
pub fn baseline_detect(
    cube: &LogitCube,
    pauses: &[Pause],
    config: &BaselineConfig,
) -> Result<Vec<Prediction>, String> {
    config.validate()?;
    let n = cube.n_frames();
    let mut out = Vec::new();
    let mut probs = vec![vec![0.0f32; n]; CUBE_CLASSES];
    for slot in 0..N_SLOTS {
        for t in 0..n {
            let row = &cube.frame(t)[slot * CUBE_CLASSES..(slot + 1) * CUBE_CLASSES];
            let mut p = [0.0f32; CUBE_CLASSES];
            p.copy_from_slice(row);
            crate::nn::softmax_in_place(&mut p);
            for k in 0..CUBE_CLASSES {
                probs[k][t] = p[k];
            }
        }
        for (k, line) in probs.iter().enumerate().skip(1) {
            let smooth = moving_average(line, config.window);
            for t in pick_peaks(&smooth, config.threshold, config.nms_radius) {
                if config.pause_filter && in_pause(pauses, t) {
                    continue;
                }
                let category = Category::from_index(k - 1).expect("action class");
                out.push(Prediction {
                    category,
                    slot,
                    frame: t,
                    confidence: smooth[t],
                });
            }
        }
    }
    out.sort_by_key(|p| (p.frame, p.slot, p.category));
    Ok(out)
}
