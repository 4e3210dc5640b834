//! Role-ordered encoder tokens and SOS/EOS-framed decoder targets.

use crate::nn::Tensor;
use crate::noise::{LogitCube, CUBE_CLASSES};
use crate::sim::{
    Category, EventRecord, MatchGroundTruth, PlayerTrack, RoleId, MAX_SPEED, N_CATEGORIES, N_SLOTS,
};

pub const STATE_FEATURES: usize = 5;
pub const STATE_WIDTH: usize = N_SLOTS * STATE_FEATURES;
pub const LOGIT_WIDTH: usize = N_SLOTS * CUBE_CLASSES;
/// Value of every feature of an unoccupied slot.
pub const PAD_VALUE: f32 = -15.0;
pub const SOS: usize = N_CATEGORIES;
pub const EOS: usize = N_CATEGORIES + 1;
pub const TARGET_CATEGORIES: usize = N_CATEGORIES + 2;

pub type GameStateFrame = [f32; STATE_WIDTH];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReprError {
    #[error("window [{start}, {end}) exceeds {n_frames} frames")]
    WindowOutOfBounds {
        start: usize,
        end: usize,
        n_frames: usize,
    },
    #[error("event at frame {frame} lies outside window [{start}, {end})")]
    EventOutsideWindow {
        frame: usize,
        start: usize,
        end: usize,
    },
}

pub fn slot_index(role: RoleId) -> usize {
    role.slot()
}

pub fn encoder_width(context: usize) -> usize {
    LOGIT_WIDTH + STATE_WIDTH + context + 2
}

pub fn decoder_width(context: usize) -> usize {
    TARGET_CATEGORIES + N_SLOTS + context + 2
}

/// Features of one frame, laid out by slot regardless of roster order.
pub fn game_state_vector(roster: &[(RoleId, &PlayerTrack)], frame: usize) -> GameStateFrame {
    let mut out = [PAD_VALUE; STATE_WIDTH];
    for (role, track) in roster {
        if !track.occupied[frame] {
            continue;
        }
        let o = role.slot() * STATE_FEATURES;
        out[o] = track.x[frame].clamp(0.0, 1.0);
        out[o + 1] = track.y[frame].clamp(0.0, 1.0);
        out[o + 2] = track.vx[frame].clamp(-MAX_SPEED, MAX_SPEED);
        out[o + 3] = track.vy[frame].clamp(-MAX_SPEED, MAX_SPEED);
        out[o + 4] = if track.visible[frame] { 1.0 } else { 0.0 };
    }
    out
}

pub fn roster(gt: &MatchGroundTruth) -> Vec<(RoleId, &PlayerTrack)> {
    gt.tracks
        .iter()
        .enumerate()
        .map(|(s, t)| (RoleId::from_slot(s).expect("slot in range"), t))
        .collect()
}

/// Game state for every frame of a match.
pub fn match_states(gt: &MatchGroundTruth) -> Vec<GameStateFrame> {
    let r = roster(gt);
    (0..gt.n_frames).map(|f| game_state_vector(&r, f)).collect()
}

/// `[L, 234 + 130 + L + 2]`; token `t` carries frame one-hot index `t + 1`.
/// With `game_state` off the 130 state features are all padding.
pub fn build_encoder_sequence(
    cube: &LogitCube,
    states: &[GameStateFrame],
    start: usize,
    context: usize,
    game_state: bool,
) -> Result<Tensor, ReprError> {
    let n_frames = cube.n_frames().min(states.len());
    if start + context > n_frames {
        return Err(ReprError::WindowOutOfBounds {
            start,
            end: start + context,
            n_frames,
        });
    }
    let width = encoder_width(context);
    let mut data = vec![0.0f32; context * width];
    for (t, token) in data.chunks_mut(width).enumerate() {
        token[..LOGIT_WIDTH].copy_from_slice(cube.frame(start + t));
        let state = &mut token[LOGIT_WIDTH..LOGIT_WIDTH + STATE_WIDTH];
        if game_state {
            state.copy_from_slice(&states[start + t]);
        } else {
            state.fill(PAD_VALUE);
        }
        token[LOGIT_WIDTH + STATE_WIDTH + t + 1] = 1.0;
    }
    Ok(Tensor::new(vec![context, width], data).expect("sized above"))
}

/// Decoder token: SOS/EOS carry no role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TargetToken {
    pub category: usize,
    pub slot: Option<usize>,
    pub frame: usize,
}

impl TargetToken {
    pub fn sos() -> Self {
        Self {
            category: SOS,
            slot: None,
            frame: 0,
        }
    }

    pub fn eos(context: usize) -> Self {
        Self {
            category: EOS,
            slot: None,
            frame: context + 1,
        }
    }

    pub fn is_event(&self) -> bool {
        self.category < N_CATEGORIES
    }

    /// One-hot row of width `10 + 26 + L + 2`.
    pub fn write_one_hot(&self, context: usize, row: &mut [f32]) {
        debug_assert_eq!(row.len(), decoder_width(context));
        row.fill(0.0);
        row[self.category] = 1.0;
        if let Some(s) = self.slot {
            row[TARGET_CATEGORIES + s] = 1.0;
        }
        row[TARGET_CATEGORIES + N_SLOTS + self.frame] = 1.0;
    }
}

/// `[SOS, events by (frame, slot), EOS]` with frames re-based to `1..=L`.
pub fn build_target_sequence(
    events: &[EventRecord],
    start: usize,
    context: usize,
) -> Result<Vec<TargetToken>, ReprError> {
    let end = start + context;
    let mut sorted = events.to_vec();
    sorted.sort_by_key(|e| (e.frame, e.actor.slot()));
    let mut out = Vec::with_capacity(sorted.len() + 2);
    out.push(TargetToken::sos());
    for e in &sorted {
        if e.frame < start || e.frame >= end {
            return Err(ReprError::EventOutsideWindow {
                frame: e.frame,
                start,
                end,
            });
        }
        out.push(TargetToken {
            category: e.category.index(),
            slot: Some(e.actor.slot()),
            frame: e.frame - start + 1,
        });
    }
    out.push(TargetToken::eos(context));
    Ok(out)
}

/// Events of a token list back in absolute frames; SOS, EOS and tokens
/// without a valid frame or role are skipped.
pub fn decode_targets(tokens: &[TargetToken], start: usize, context: usize) -> Vec<EventRecord> {
    tokens
        .iter()
        .filter(|t| t.is_event() && (1..=context).contains(&t.frame))
        .filter_map(|t| {
            Some(EventRecord {
                frame: start + t.frame - 1,
                category: Category::from_index(t.category)?,
                actor: RoleId::from_slot(t.slot?)?,
            })
        })
        .collect()
}

/// Decoder input rows `[n - 1, width]` (all tokens but the last).
pub fn decoder_inputs(tokens: &[TargetToken], context: usize) -> Tensor {
    let width = decoder_width(context);
    let rows = tokens.len().saturating_sub(1);
    let mut data = vec![0.0f32; rows * width];
    for (tok, row) in tokens.iter().zip(data.chunks_mut(width)) {
        tok.write_one_hot(context, row);
    }
    Tensor::new(vec![rows, width], data).expect("sized above")
}

/// One training or evaluation window.
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub match_id: usize,
    pub start: usize,
    pub encoder: Tensor,
    pub targets: Vec<TargetToken>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{corrupt_match, NoiseConfig};
    use crate::sim::{simulate_match, Role, SimConfig};

    #[test]
    fn slot_examples() {
        assert_eq!(slot_index(RoleId::new(0, Role::Goalkeeper)), 0);
        assert_eq!(slot_index(RoleId::new(1, Role::Goalkeeper)), 13);
        assert_eq!(slot_index(RoleId::new(0, Role::RightBack)), 12);
    }

    #[test]
    fn widths() {
        assert_eq!(encoder_width(750), 1116);
        assert_eq!(encoder_width(250), 616);
        assert_eq!(encoder_width(100), 466);
        assert_eq!(decoder_width(750), 10 + 26 + 752);
    }

    #[test]
    fn padding_and_counts() {
        let gt = simulate_match(&SimConfig::with_frames(1000), 0).unwrap();
        let v = game_state_vector(&roster(&gt), 0);
        let padded = (0..N_SLOTS)
            .filter(|s| v[s * 5..s * 5 + 5].iter().all(|&x| x == PAD_VALUE))
            .count();
        assert_eq!(padded, 4);
        for s in 0..N_SLOTS {
            let f = &v[s * 5..s * 5 + 5];
            if f[0] != PAD_VALUE {
                assert!(f.iter().all(|&x| (-0.5..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn encoder_frame_one_hot() {
        let gt = simulate_match(&SimConfig::with_frames(1000), 1).unwrap();
        let cube = corrupt_match(&gt, &NoiseConfig::default(), 0).unwrap();
        let states = match_states(&gt);
        let l = 100;
        let enc = build_encoder_sequence(&cube, &states, 200, l, true).unwrap();
        assert_eq!(enc.shape(), &[l, 466]);
        for t in 0..l {
            let onehot = &enc.row(t)[LOGIT_WIDTH + STATE_WIDTH..];
            assert_eq!(onehot.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(onehot[t + 1], 1.0);
        }
        assert!(build_encoder_sequence(&cube, &states, 901, l, true).is_err());
        let off = build_encoder_sequence(&cube, &states, 200, l, false).unwrap();
        assert!(off.row(5)[LOGIT_WIDTH..LOGIT_WIDTH + STATE_WIDTH]
            .iter()
            .all(|&v| v == PAD_VALUE));
    }

    #[test]
    fn target_examples() {
        assert_eq!(
            build_target_sequence(&[], 0, 250).unwrap(),
            vec![TargetToken::sos(), TargetToken::eos(250)]
        );
        let e = EventRecord {
            frame: 509,
            category: Category::Pass,
            actor: RoleId::from_slot(5).unwrap(),
        };
        let t = build_target_sequence(&[e], 500, 250).unwrap();
        assert_eq!(
            t[1],
            TargetToken {
                category: 0,
                slot: Some(5),
                frame: 10
            }
        );
        assert_eq!((t[0].category, t[0].frame), (8, 0));
        assert_eq!((t[2].category, t[2].frame), (9, 251));
        assert_eq!(decode_targets(&t, 500, 250), vec![e]);
        assert!(build_target_sequence(&[e], 0, 250).is_err());
    }

    #[test]
    fn decoder_rows_are_shifted_tokens() {
        let e = EventRecord {
            frame: 3,
            category: Category::Shot,
            actor: RoleId::from_slot(11).unwrap(),
        };
        let t = build_target_sequence(&[e], 0, 10).unwrap();
        let x = decoder_inputs(&t, 10);
        assert_eq!(x.shape(), &[2, 48]);
        assert_eq!(x.row(0)[SOS], 1.0);
        assert_eq!(x.row(0)[TARGET_CATEGORIES + N_SLOTS], 1.0);
        assert_eq!(x.row(0).iter().sum::<f32>(), 2.0);
        assert_eq!(x.row(1)[Category::Shot.index()], 1.0);
        assert_eq!(x.row(1)[TARGET_CATEGORIES + 11], 1.0);
        assert_eq!(x.row(1)[TARGET_CATEGORIES + N_SLOTS + 4], 1.0);
    }
}
