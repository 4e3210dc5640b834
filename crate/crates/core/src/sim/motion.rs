use super::types::{PlayerTrack, Role, RoleId, FPS, N_SLOTS};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Velocity bound in pitch units per second.
pub const MAX_SPEED: f32 = 0.5;

/// Formation anchor for team 0 (attacking towards x = 1).
fn base_anchor(role: Role) -> [f32; 2] {
    match role {
        Role::Goalkeeper => [0.05, 0.5],
        Role::LeftBack => [0.25, 0.15],
        Role::LeftCenterBack => [0.2, 0.35],
        Role::MidCenterBack => [0.18, 0.5],
        Role::RightCenterBack => [0.2, 0.65],
        Role::LeftMidfielder => [0.45, 0.25],
        Role::RightMidfielder => [0.45, 0.75],
        Role::DefensiveMidfielder => [0.35, 0.5],
        Role::AttackingMidfielder => [0.55, 0.5],
        Role::LeftWinger => [0.7, 0.15],
        Role::RightWinger => [0.7, 0.85],
        Role::CentralForward => [0.75, 0.5],
        Role::RightBack => [0.25, 0.85],
    }
}

/// Anchor in pitch coordinates; team 1 is the point mirror of team 0.
pub fn anchor(id: RoleId) -> [f32; 2] {
    let [x, y] = base_anchor(id.role());
    if id.team == 0 {
        [x, y]
    } else {
        [1.0 - x, 1.0 - y]
    }
}

/// Unit x-direction of the opponent goal.
pub fn attack_direction(team: u8) -> f32 {
    if team == 0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    /// Mean-reversion rate towards the anchor, per second.
    pub reversion_rate: f64,
    /// Diffusion, pitch units per sqrt(second).
    pub noise_sd: f64,
    /// Fraction of the ball's offset from the centre that shifts the whole block.
    pub block_shift_x: f64,
    pub block_shift_y: f64,
    /// Reversion rate of the nearest player of each team towards the ball.
    pub press_rate: f64,
    /// Reversion rate of a player with an explicit target (the next actor).
    pub chase_rate: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            reversion_rate: 0.8,
            noise_sd: 0.03,
            block_shift_x: 0.25,
            block_shift_y: 0.15,
            press_rate: 0.6,
            chase_rate: 3.0,
        }
    }
}

/// Explicit per-frame target for one slot, overriding its anchor.
#[derive(Clone, Copy, Debug)]
pub struct Attractor {
    pub slot: usize,
    pub target: [f32; 2],
    pub rate: f64,
}

#[derive(Clone, Debug)]
pub struct MotionContext<'a> {
    pub ball: [f32; 2],
    pub paused: bool,
    pub attractors: &'a [Attractor],
}

fn dist2(a: [f32; 2], b: [f32; 2]) -> f32 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Advance every slot from `frame - 1` to `frame`.
///
/// `occupied[frame]` must already be set. Slots entering the pitch appear at
/// their anchor with zero velocity; vacated slots freeze.
pub fn player_motion<R: Rng + ?Sized>(
    tracks: &mut [PlayerTrack],
    frame: usize,
    ctx: &MotionContext<'_>,
    config: &MotionConfig,
    rng: &mut R,
) {
    assert!(frame >= 1 && tracks.len() == N_SLOTS);
    let dt = 1.0 / FPS as f64;
    let prev = frame - 1;

    let mut pressing = [usize::MAX; 2];
    if !ctx.paused && config.press_rate > 0.0 {
        for (team, pick) in pressing.iter_mut().enumerate() {
            let mut best = f32::INFINITY;
            for slot in team * 13..(team + 1) * 13 {
                if tracks[slot].occupied[prev] && tracks[slot].occupied[frame] {
                    let d = dist2([tracks[slot].x[prev], tracks[slot].y[prev]], ctx.ball);
                    if d < best {
                        best = d;
                        *pick = slot;
                    }
                }
            }
        }
    }
    let shift = if ctx.paused {
        [0.0, 0.0]
    } else {
        [
            (config.block_shift_x * (ctx.ball[0] as f64 - 0.5)) as f32,
            (config.block_shift_y * (ctx.ball[1] as f64 - 0.5)) as f32,
        ]
    };

    let max_step = MAX_SPEED / FPS as f32;
    for (slot, track) in tracks.iter_mut().enumerate() {
        let id = RoleId::from_slot(slot).expect("slot in range");
        if !track.occupied[frame] {
            track.x[frame] = track.x[prev];
            track.y[frame] = track.y[prev];
            track.vx[frame] = 0.0;
            track.vy[frame] = 0.0;
            continue;
        }
        if !track.occupied[prev] {
            let [ax, ay] = anchor(id);
            track.x[frame] = ax;
            track.y[frame] = ay;
            track.vx[frame] = 0.0;
            track.vy[frame] = 0.0;
            continue;
        }
        let a = anchor(id);
        let (target, rate) = match ctx.attractors.iter().find(|t| t.slot == slot) {
            Some(t) => (t.target, t.rate),
            None if pressing.contains(&slot) => (ctx.ball, config.press_rate),
            None => ([a[0] + shift[0], a[1] + shift[1]], config.reversion_rate),
        };
        let pos = [track.x[prev], track.y[prev]];
        let mut next = [0.0f32; 2];
        for k in 0..2 {
            let noise: f64 = if config.noise_sd > 0.0 {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
            let step =
                rate * (target[k] - pos[k]) as f64 * dt + config.noise_sd * dt.sqrt() * noise;
            let step = (step as f32).clamp(-max_step, max_step);
            next[k] = (pos[k] + step).clamp(0.0, 1.0);
        }
        track.x[frame] = next[0];
        track.y[frame] = next[1];
        track.vx[frame] = ((next[0] - pos[0]) * FPS as f32).clamp(-MAX_SPEED, MAX_SPEED);
        track.vy[frame] = ((next[1] - pos[1]) * FPS as f32).clamp(-MAX_SPEED, MAX_SPEED);
    }
}

/// Place every occupied slot at its anchor at frame 0.
pub fn place_at_anchors(tracks: &mut [PlayerTrack]) {
    for (slot, track) in tracks.iter_mut().enumerate() {
        let [x, y] = anchor(RoleId::from_slot(slot).expect("slot in range"));
        track.x[0] = x;
        track.y[0] = y;
    }
}
