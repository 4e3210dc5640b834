//! Teacher-forced training and greedy full-match inference.

pub mod experiment;
mod infer;

pub use infer::{
    confidence_score, generate, infer_full_match, max_decode_len, merge_duplicates, window_starts,
    ConfidenceMode, Generated, InferConfig, InferDiagnostics, MERGE_RADIUS,
};

use crate::model::{DstModel, InputNorm, LossBreakdown};
use crate::nn::{AdamW, NnError, OptimizerState};
use crate::noise::LogitCube;
use crate::repr::{
    build_encoder_sequence, build_target_sequence, encoder_width, match_states, GameStateFrame,
    ReprError, WindowSample, LOGIT_WIDTH, STATE_WIDTH,
};
use crate::sim::{EventRecord, MatchGroundTruth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Repr(#[from] ReprError),
    #[error("no match is long enough for windows of {0} frames")]
    NoWindows(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub windows_per_game: usize,
    pub seed: u64,
    /// Off replaces every state feature with the padding value.
    pub game_state: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 2.5e-4,
            lr_drop_epoch: 3,
            lr_drop_factor: 10.0,
            weight_decay: 1e-5,
            batch_size: 16,
            windows_per_game: 50,
            seed: 0,
            game_state: true,
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            batch_size: 48,
            windows_per_game: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.windows_per_game == 0 {
            return bad("epochs, batch_size and windows_per_game must be positive");
        }
        if !(self.lr > 0.0 && self.lr_drop_factor > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr and lr_drop_factor must be positive, weight_decay non-negative");
        }
        if self.lr_drop_epoch >= self.epochs {
            return bad("lr_drop_epoch must come before the last epoch");
        }
        Ok(())
    }

    pub fn lr_schedule(&self, epoch: usize) -> f32 {
        if epoch < self.lr_drop_epoch {
            self.lr
        } else {
            self.lr / self.lr_drop_factor
        }
    }
}

/// Everything the model sees of one match, plus its labels.
#[derive(Clone, Debug)]
pub struct MatchData {
    pub id: usize,
    pub cube: LogitCube,
    pub states: Vec<GameStateFrame>,
    pub events: Vec<EventRecord>,
}

impl MatchData {
    pub fn new(id: usize, gt: &MatchGroundTruth, cube: LogitCube) -> Self {
        Self {
            id,
            cube,
            states: match_states(gt),
            events: gt.events.clone(),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.cube.n_frames().min(self.states.len())
    }

    pub fn window(
        &self,
        start: usize,
        context: usize,
        game_state: bool,
    ) -> Result<WindowSample, ReprError> {
        let encoder = build_encoder_sequence(&self.cube, &self.states, start, context, game_state)?;
        let inside: Vec<EventRecord> = self
            .events
            .iter()
            .filter(|e| e.frame >= start && e.frame < start + context)
            .copied()
            .collect();
        let targets = build_target_sequence(&inside, start, context)?;
        Ok(WindowSample {
            match_id: self.id,
            start,
            encoder,
            targets,
        })
    }
}

/// `(match index, start)` pairs, `n` per match, uniform over valid starts.
/// Matches shorter than `context` are skipped.
pub fn sample_training_windows<R: Rng + ?Sized>(
    matches: &[MatchData],
    context: usize,
    n: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(matches.len() * n);
    for (i, m) in matches.iter().enumerate() {
        if m.n_frames() < context {
            log::warn!(
                "match {} has {} frames, shorter than the {context}-frame window; skipped",
                m.id,
                m.n_frames()
            );
            continue;
        }
        let last = m.n_frames() - context;
        out.extend((0..n).map(|_| (i, rng.random_range(0..=last))));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub windows: usize,
    /// Per-head means over the epoch's windows.
    pub loss: LossBreakdown,
}

/// Optimizer state carried between epochs so training can resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: OptimizerState,
    pub next_epoch: usize,
}

impl TrainState {
    pub fn new(model: &DstModel) -> Self {
        Self {
            optimizer: OptimizerState::new(&model.params),
            next_epoch: 0,
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn dropout_rng(seed: u64, epoch: usize, window: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d409_0u64);
    rng.set_stream(((epoch as u64) << 40) | window as u64);
    rng
}

/// Train from `state.next_epoch` to the end. Windows of a batch run in
/// parallel; their gradients are summed in window order, so results do not
/// depend on the thread count. `on_epoch` runs after every epoch (progress
/// output, checkpoints).
pub fn train<F>(
    model: &mut DstModel,
    state: &mut TrainState,
    matches: &[MatchData],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochStats>, PipelineError>
where
    F: FnMut(&EpochStats, &DstModel, &TrainState) -> Result<(), PipelineError>,
{
    config.validate()?;
    let context = model.config.context;
    if model.input_norm.is_none() {
        model.input_norm = Some(fit_input_norm(matches, context, config)?);
    }
    let mut history = Vec::new();
    for epoch in state.next_epoch..config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut picks =
            sample_training_windows(matches, context, config.windows_per_game, &mut rng);
        if picks.is_empty() {
            return Err(PipelineError::NoWindows(context));
        }
        shuffle(&mut picks, &mut rng);
        let lr = config.lr_schedule(epoch);
        let opt = AdamW::new(lr, config.weight_decay);
        let mut sum = LossBreakdown::default();
        for (batch_idx, batch) in picks.chunks(config.batch_size).enumerate() {
            let offset = batch_idx * config.batch_size;
            let frozen: &DstModel = model;
            let results: Vec<Result<(LossBreakdown, Vec<Vec<f32>>), PipelineError>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &(mi, start))| {
                    let sample = matches[mi].window(start, context, config.game_state)?;
                    let mut drng = dropout_rng(config.seed, epoch, offset + k);
                    let (loss, grads) = frozen.window_loss(
                        &sample.encoder,
                        &sample.targets,
                        Some(&mut drng),
                        true,
                    )?;
                    Ok((loss, grads.expect("gradients requested")))
                })
                .collect();
            let mut total: Option<Vec<Vec<f32>>> = None;
            let mut batch_loss = LossBreakdown::default();
            for r in results {
                let (loss, grads) = r?;
                add_loss(&mut batch_loss, &loss);
                match total.as_mut() {
                    None => total = Some(grads),
                    Some(t) => {
                        for (a, b) in t.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f32;
            let finite = grads.iter().flatten().all(|g| g.is_finite());
            if !batch_loss.total.is_finite() || !finite {
                let windows: Vec<String> = batch
                    .iter()
                    .map(|&(mi, s)| format!("match {} start {s}", matches[mi].id))
                    .collect();
                return Err(PipelineError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    detail: format!(
                        "summed loss {:?}, windows [{}]",
                        batch_loss,
                        windows.join(", ")
                    ),
                });
            }
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            opt.step(&mut model.params, &grads, &mut state.optimizer)?;
            add_loss(&mut sum, &batch_loss);
            if batch_idx % 50 == 49 {
                log::debug!(
                    "epoch {epoch} batch {}: mean loss {:.4}",
                    batch_idx + 1,
                    batch_loss.total / batch.len() as f64
                );
            }
        }
        let n = picks.len() as f64;
        let stats = EpochStats {
            epoch,
            lr,
            windows: picks.len(),
            loss: LossBreakdown {
                category: sum.category / n,
                role: sum.role / n,
                frame: sum.frame / n,
                total: sum.total / n,
            },
        };
        log::info!("epoch {epoch}: lr {lr:e}, loss {:.4}", stats.loss.total);
        state.next_epoch = epoch + 1;
        on_epoch(&stats, model, state)?;
        history.push(stats);
    }
    Ok(history)
}

/// Windows used to fit the encoder feature statistics, per match.
const NORM_WINDOWS_PER_GAME: usize = 4;

fn fit_input_norm(
    matches: &[MatchData],
    context: usize,
    config: &TrainConfig,
) -> Result<InputNorm, PipelineError> {
    let mut rng = epoch_rng(config.seed, usize::MAX);
    let picks = sample_training_windows(matches, context, NORM_WINDOWS_PER_GAME, &mut rng);
    if picks.is_empty() {
        return Err(PipelineError::NoWindows(context));
    }
    let windows = picks
        .iter()
        .map(|&(mi, start)| {
            build_encoder_sequence(
                &matches[mi].cube,
                &matches[mi].states,
                start,
                context,
                config.game_state,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(InputNorm::fit(
        encoder_width(context),
        LOGIT_WIDTH + STATE_WIDTH,
        &windows,
    )?)
}

fn add_loss(acc: &mut LossBreakdown, l: &LossBreakdown) {
    acc.category += l.category;
    acc.role += l.role;
    acc.frame += l.frame;
    acc.total += l.total;
}

fn shuffle<T, R: Rng + ?Sized>(v: &mut [T], rng: &mut R) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}
