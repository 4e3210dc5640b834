//! Synthetic matches: player tracks, pauses and on-the-ball events.

mod kernel;
mod motion;
mod types;
mod visibility;

pub use kernel::{next_event, KernelConfig, PlayState};
pub use motion::{
    anchor, attack_direction, place_at_anchors, player_motion, Attractor, MotionConfig,
    MotionContext, MAX_SPEED,
};
pub use types::*;
pub use visibility::{visibility_process, VisibilityConfig};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_frames: usize,
    /// Probability that a team makes a positional change during a pause.
    pub p_substitution: f64,
    pub kernel: KernelConfig,
    pub motion: MotionConfig,
    pub visibility: VisibilityConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_frames: 45_000,
            p_substitution: 0.15,
            kernel: KernelConfig::default(),
            motion: MotionConfig::default(),
            visibility: VisibilityConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn with_frames(n_frames: usize) -> Self {
        Self {
            n_frames,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_frames < 1000 {
            return Err(SimError::Config(format!(
                "n_frames = {} is below the minimum of 1000",
                self.n_frames
            )));
        }
        if !(0.0..=1.0).contains(&self.p_substitution) {
            return Err(SimError::Config(
                "p_substitution is not a probability".into(),
            ));
        }
        let m = &self.motion;
        let rates = [
            m.reversion_rate,
            m.noise_sd,
            m.press_rate,
            m.chase_rate,
            m.block_shift_x,
            m.block_shift_y,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(SimError::Config(
                "motion parameters must be finite and non-negative".into(),
            ));
        }
        self.kernel.validate().map_err(SimError::Config)?;
        self.visibility.validate().map_err(SimError::Config)
    }
}

/// Outfield roles left empty by each base formation.
const FORMATIONS: [[Role; 2]; 4] = [
    [Role::MidCenterBack, Role::AttackingMidfielder],
    [Role::MidCenterBack, Role::DefensiveMidfielder],
    [Role::LeftWinger, Role::RightWinger],
    [Role::MidCenterBack, Role::LeftMidfielder],
];

struct Pending {
    event: EventRecord,
    state: PlayState,
}

fn position(tracks: &[PlayerTrack], slot: usize, frame: usize) -> [f32; 2] {
    [tracks[slot].x[frame], tracks[slot].y[frame]]
}

fn lerp(a: [f32; 2], b: [f32; 2], t: f32) -> [f32; 2] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

fn schedule_substitution<R: Rng + ?Sized>(
    occupied: &[bool; N_SLOTS],
    keep: usize,
    pause: Pause,
    n_frames: usize,
    rng: &mut R,
    toggles: &mut Vec<(usize, usize, bool)>,
) {
    let join_frame = (pause.start + pause.end) / 2;
    if join_frame >= n_frames {
        return;
    }
    let team: usize = rng.random_range(0..2);
    let outfield = (team * ROLES_PER_TEAM + 1)..((team + 1) * ROLES_PER_TEAM);
    let leaving: Vec<usize> = outfield
        .clone()
        .filter(|&s| occupied[s] && s != keep)
        .collect();
    let joining: Vec<usize> = outfield.filter(|&s| !occupied[s]).collect();
    if let (Some(&l), Some(&j)) = (leaving.choose(rng), joining.choose(rng)) {
        toggles.push((pause.start, l, false));
        toggles.push((join_frame, j, true));
    }
}

/// Deterministic in `(config, seed)`.
pub fn simulate_match(config: &SimConfig, seed: u64) -> Result<MatchGroundTruth, SimError> {
    config.validate()?;
    let n = config.n_frames;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracks: Vec<PlayerTrack> = (0..N_SLOTS).map(|_| PlayerTrack::with_len(n)).collect();

    let mut occupied = [true; N_SLOTS];
    for team in 0..2 {
        let formation = FORMATIONS.choose(&mut rng).expect("non-empty");
        for role in formation {
            occupied[RoleId::new(team, *role).slot()] = false;
        }
    }
    place_at_anchors(&mut tracks);
    for (slot, t) in tracks.iter_mut().enumerate() {
        t.occupied[0] = occupied[slot];
    }

    let mut positions = [[0.0f32; 2]; N_SLOTS];
    for (s, p) in positions.iter_mut().enumerate() {
        *p = position(&tracks, s, 0);
    }
    let kickoff = PlayState::kickoff(positions, occupied);
    let (event, state) = next_event(&kickoff, &config.kernel, &mut rng);
    let mut pending = (event.frame < n).then_some(Pending { event, state });

    let mut events = Vec::new();
    let mut pauses = Vec::new();
    let mut toggles: Vec<(usize, usize, bool)> = Vec::new();
    let mut last_pos = [0.5f32, 0.5];
    let mut last_frame = 0usize;
    let mut last_actor: Option<usize> = None;
    let mut ball = last_pos;

    for t in 1..n {
        for &(f, slot, on) in &toggles {
            if f == t {
                occupied[slot] = on;
            }
        }
        for (slot, track) in tracks.iter_mut().enumerate() {
            track.occupied[t] = occupied[slot];
        }

        let mut attractors = Vec::with_capacity(1);
        let mut paused = false;
        if let Some(p) = &pending {
            let actor = p.event.actor.slot();
            match (p.state.pause, p.state.restart_spot) {
                (Some(pause), Some(spot)) => {
                    paused = pause.contains(t);
                    ball = if t >= pause.start {
                        spot
                    } else {
                        lerp(
                            last_pos,
                            spot,
                            (t - last_frame) as f32 / (pause.start - last_frame) as f32,
                        )
                    };
                    attractors.push(Attractor {
                        slot: actor,
                        target: spot,
                        rate: config.motion.chase_rate,
                    });
                }
                _ => {
                    let target_pos = position(&tracks, actor, t - 1);
                    let frac = (t - last_frame) as f32 / (p.event.frame - last_frame) as f32;
                    ball = lerp(last_pos, target_pos, frac.min(1.0));
                    let target = if last_actor == Some(actor) {
                        let dir = attack_direction(p.event.actor.team);
                        [target_pos[0] + 0.03 * dir, target_pos[1]]
                    } else {
                        ball
                    };
                    attractors.push(Attractor {
                        slot: actor,
                        target,
                        rate: config.motion.chase_rate,
                    });
                }
            }
        }
        let ctx = MotionContext {
            ball,
            paused,
            attractors: &attractors,
        };
        player_motion(&mut tracks, t, &ctx, &config.motion, &mut rng);

        let due = pending.as_ref().is_some_and(|p| p.event.frame == t);
        if due {
            let Pending { event, mut state } = pending.take().expect("due event");
            if let Some(pause) = state.pause {
                pauses.push(pause);
            }
            events.push(event);
            let slot = event.actor.slot();
            last_pos = position(&tracks, slot, t);
            ball = last_pos;
            last_frame = t;
            last_actor = Some(slot);

            for (s, p) in state.positions.iter_mut().enumerate() {
                *p = position(&tracks, s, t);
            }
            state.occupied = occupied;
            state.pause = None;
            state.restart_spot = None;
            let (next, next_state) = next_event(&state, &config.kernel, &mut rng);
            if let Some(pause) = next_state.pause {
                if config.p_substitution > 0.0 && rng.random::<f64>() < config.p_substitution {
                    schedule_substitution(
                        &occupied,
                        next.actor.slot(),
                        pause,
                        n,
                        &mut rng,
                        &mut toggles,
                    );
                }
                if next.frame >= n && pause.start < n {
                    pauses.push(Pause {
                        start: pause.start,
                        end: n,
                    });
                }
            }
            pending = (next.frame < n).then_some(Pending {
                event: next,
                state: next_state,
            });
        }
    }

    visibility_process(&mut tracks, &events, &config.visibility, &mut rng);
    Ok(MatchGroundTruth {
        n_frames: n,
        fps: FPS,
        tracks,
        events,
        pauses,
    })
}

/// Pooled events per 100 frames and category shares over a set of matches.
pub fn event_statistics(matches: &[MatchGroundTruth]) -> (f64, [f64; N_CATEGORIES]) {
    let frames: usize = matches.iter().map(|m| m.n_frames).sum();
    let mut counts = [0usize; N_CATEGORIES];
    for e in matches.iter().flat_map(|m| &m.events) {
        counts[e.category.index()] += 1;
    }
    let total: usize = counts.iter().sum();
    let shares = counts.map(|c| {
        if total == 0 {
            0.0
        } else {
            c as f64 / total as f64
        }
    });
    (100.0 * total as f64 / frames.max(1) as f64, shares)
}
