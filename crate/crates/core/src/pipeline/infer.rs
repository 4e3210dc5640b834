use super::MatchData;
use crate::eval::Prediction;
use crate::model::DstModel;
use crate::nn::{Graph, NnError, Tensor};
use crate::repr::{decoder_inputs, TargetToken, EOS};
use crate::sim::{Category, N_CATEGORIES};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Two predictions of the same category and player closer than this are
/// treated as one.
pub const MERGE_RADIUS: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMode {
    /// Product of the category, role and frame probabilities.
    #[default]
    Joint,
    CategoryOnly,
}

pub fn confidence_score(p_category: f64, p_role: f64, p_frame: f64, mode: ConfidenceMode) -> f64 {
    match mode {
        ConfidenceMode::Joint => p_category * p_role * p_frame,
        ConfidenceMode::CategoryOnly => p_category,
    }
}

/// Sequence length cap, SOS and EOS included.
pub fn max_decode_len(context: usize) -> usize {
    if context == 750 {
        64
    } else {
        context.div_ceil(12) + 4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Every token fed to the decoder, starting with SOS, plus EOS if emitted.
    pub tokens: Vec<TargetToken>,
    /// Kept event tokens with their head probabilities.
    pub events: Vec<(TargetToken, [f64; 3])>,
    pub truncated: bool,
    /// Event tokens emitted with frame 0 or `L + 1`, or an SOS emitted
    /// mid-sequence.
    pub dropped: usize,
}

fn softmax_pick(row: &[f32]) -> (usize, f64) {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    (best, ((row[best] - max) as f64).exp() / sum)
}

/// Greedy decoding: encode once, then feed back the argmax of every head
/// until EOS or `max_len` tokens.
pub fn generate(model: &DstModel, encoder: &Tensor, max_len: usize) -> Result<Generated, NnError> {
    if max_len < 2 {
        return Err(NnError::Config(format!(
            "max_len {max_len} leaves no room for SOS and EOS"
        )));
    }
    let context = model.config.context;
    let mut g = Graph::new(&model.params);
    let memory = model.encode(&mut g, encoder.clone(), None)?;
    let cache = model.memory_cache(&mut g, memory)?;
    let mut tokens = vec![TargetToken::sos()];
    let mut events = Vec::new();
    let mut dropped = 0;
    while tokens.len() < max_len {
        let mut inputs = tokens.clone();
        // decoder_inputs drops the last token; pad with a dummy.
        inputs.push(TargetToken::eos(context));
        let heads = model.decode(&mut g, &cache, decoder_inputs(&inputs, context), None)?;
        let last = tokens.len() - 1;
        let (category, pc) = softmax_pick(g.value(heads.category).row(last));
        let (slot, pr) = softmax_pick(g.value(heads.role).row(last));
        let (frame, pf) = softmax_pick(g.value(heads.frame).row(last));
        if category == EOS {
            tokens.push(TargetToken::eos(context));
            return Ok(Generated {
                tokens,
                events,
                truncated: false,
                dropped,
            });
        }
        let token = if category < N_CATEGORIES {
            TargetToken {
                category,
                slot: Some(slot),
                frame,
            }
        } else {
            TargetToken {
                category,
                slot: None,
                frame,
            }
        };
        if category < N_CATEGORIES && (1..=context).contains(&frame) {
            events.push((token, [pc, pr, pf]));
        } else {
            dropped += 1;
        }
        tokens.push(token);
    }
    Ok(Generated {
        tokens,
        events,
        truncated: true,
        dropped,
    })
}

/// Window starts at stride `context`; the last window is right-aligned to
/// the match end when the length is not a multiple.
pub fn window_starts(n_frames: usize, context: usize) -> Vec<usize> {
    if context == 0 || n_frames < context {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..n_frames / context).map(|k| k * context).collect();
    if n_frames % context != 0 {
        starts.push(n_frames - context);
    }
    starts
}

/// Keep the most confident of any same-category, same-player predictions
/// within `MERGE_RADIUS` frames; output sorted by frame.
pub fn merge_duplicates(mut preds: Vec<Prediction>) -> Vec<Prediction> {
    preds.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.frame.cmp(&b.frame))
    });
    let mut kept: Vec<Prediction> = Vec::with_capacity(preds.len());
    for p in preds {
        let clash = kept.iter().any(|k| {
            k.category == p.category
                && k.slot == p.slot
                && k.frame.abs_diff(p.frame) <= MERGE_RADIUS
        });
        if !clash {
            kept.push(p);
        }
    }
    kept.sort_by(|a, b| {
        a.frame
            .cmp(&b.frame)
            .then(a.slot.cmp(&b.slot))
            .then(a.category.index().cmp(&b.category.index()))
    });
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub game_state: bool,
    pub confidence: ConfidenceMode,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            game_state: true,
            confidence: ConfidenceMode::Joint,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferDiagnostics {
    pub windows: usize,
    pub truncated: usize,
    pub dropped_tokens: usize,
    pub merged: usize,
}

/// Predictions over a whole match, windows decoded in parallel.
pub fn infer_full_match(
    model: &DstModel,
    data: &MatchData,
    config: &InferConfig,
) -> Result<(Vec<Prediction>, InferDiagnostics), super::PipelineError> {
    let context = model.config.context;
    let starts = window_starts(data.n_frames(), context);
    let max_len = max_decode_len(context);
    let per_window: Vec<Result<(usize, Generated), super::PipelineError>> = starts
        .par_iter()
        .map(|&start| {
            let sample = data.window(start, context, config.game_state)?;
            Ok((start, generate(model, &sample.encoder, max_len)?))
        })
        .collect();
    let mut diag = InferDiagnostics {
        windows: starts.len(),
        ..Default::default()
    };
    let mut preds = Vec::new();
    for r in per_window {
        let (start, gen) = r?;
        diag.truncated += usize::from(gen.truncated);
        diag.dropped_tokens += gen.dropped;
        for (t, [pc, pr, pf]) in gen.events {
            preds.push(Prediction {
                category: Category::from_index(t.category).expect("event category"),
                slot: t.slot.expect("event slot"),
                frame: start + t.frame - 1,
                confidence: confidence_score(pc, pr, pf, config.confidence) as f32,
            });
        }
    }
    let before = preds.len();
    let merged = merge_duplicates(preds);
    diag.merged = before - merged.len();
    Ok((merged, diag))
}
