//! First-order Markov kernel over (possessing team, actor, category).

use super::motion::attack_direction;
use super::types::{
    Category, EventRecord, Pause, Role, RoleId, N_CATEGORIES, N_SLOTS, ROLES_PER_TEAM,
};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Relative weights of the ball holder's choice. Crosses need a wide
    /// attacking position, shots the attacking third.
    pub w_drive: f64,
    pub w_pass: f64,
    pub w_cross: f64,
    pub w_shot: f64,
    pub p_tackle: f64,
    pub p_drive_out: f64,
    pub p_pass_out: f64,
    pub p_pass_block: f64,
    pub p_intercept: f64,
    pub p_pass_aerial: f64,
    /// Share of aerial passes won by the nearest opponent.
    pub p_aerial_contest: f64,
    pub p_cross_header_own: f64,
    pub p_cross_header_opp: f64,
    pub p_cross_block: f64,
    pub p_cross_out: f64,
    pub p_header_header: f64,
    pub p_header_out: f64,
    pub p_header_retain: f64,
    pub p_throw_in_header: f64,
    pub p_block_retain: f64,
    pub p_shot_block: f64,
    /// Restart after a shot that is a goal kick rather than a throw-in.
    pub p_shot_goal_kick: f64,
    /// Same for other out-of-play situations.
    pub p_out_goal_kick: f64,
    /// Mean frames between an event and the next one, by the next category.
    pub gap_mean: [f64; N_CATEGORIES],
    pub gap_shape: f64,
    pub min_gap: usize,
    /// Minimum spacing of two events with the same slot and category.
    pub same_key_gap: usize,
    pub drive_repeat_gap: usize,
    pub out_delay: [usize; 2],
    pub pause_len: [usize; 2],
    /// Length scale of proximity-weighted receiver choice.
    pub receiver_scale: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            w_drive: 0.44,
            w_pass: 0.5,
            w_cross: 0.28,
            w_shot: 0.04,
            p_tackle: 0.007,
            p_drive_out: 0.016,
            p_pass_out: 0.02,
            p_pass_block: 0.02,
            p_intercept: 0.08,
            p_pass_aerial: 0.05,
            p_aerial_contest: 0.4,
            p_cross_header_own: 0.35,
            p_cross_header_opp: 0.2,
            p_cross_block: 0.1,
            p_cross_out: 0.15,
            p_header_header: 0.12,
            p_header_out: 0.1,
            p_header_retain: 0.55,
            p_throw_in_header: 0.1,
            p_block_retain: 0.6,
            p_shot_block: 0.3,
            p_shot_goal_kick: 0.7,
            p_out_goal_kick: 0.2,
            gap_mean: [39.0, 41.0, 28.0, 38.0, 0.0, 15.0, 33.0, 22.0],
            gap_shape: 3.0,
            min_gap: 8,
            same_key_gap: 13,
            drive_repeat_gap: 20,
            out_delay: [10, 30],
            pause_len: [150, 400],
            receiver_scale: 0.15,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<(), String> {
        let probs = [
            ("p_tackle", self.p_tackle),
            ("p_drive_out", self.p_drive_out),
            ("p_pass_out", self.p_pass_out),
            ("p_pass_block", self.p_pass_block),
            ("p_intercept", self.p_intercept),
            ("p_pass_aerial", self.p_pass_aerial),
            ("p_aerial_contest", self.p_aerial_contest),
            ("p_cross_header_own", self.p_cross_header_own),
            ("p_cross_header_opp", self.p_cross_header_opp),
            ("p_cross_block", self.p_cross_block),
            ("p_cross_out", self.p_cross_out),
            ("p_header_header", self.p_header_header),
            ("p_header_out", self.p_header_out),
            ("p_header_retain", self.p_header_retain),
            ("p_throw_in_header", self.p_throw_in_header),
            ("p_block_retain", self.p_block_retain),
            ("p_shot_block", self.p_shot_block),
            ("p_shot_goal_kick", self.p_shot_goal_kick),
            ("p_out_goal_kick", self.p_out_goal_kick),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is not a probability"));
            }
        }
        let sums = [
            ("drive outcomes", self.p_tackle + self.p_drive_out),
            (
                "pass outcomes",
                self.p_pass_out + self.p_pass_block + self.p_intercept,
            ),
            (
                "cross outcomes",
                self.p_cross_header_own
                    + self.p_cross_header_opp
                    + self.p_cross_block
                    + self.p_cross_out,
            ),
            ("header outcomes", self.p_header_header + self.p_header_out),
        ];
        for (name, s) in sums {
            if s > 1.0 {
                return Err(format!("{name} sum to {s} > 1"));
            }
        }
        let weights = [self.w_drive, self.w_pass, self.w_cross, self.w_shot];
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite()))
            || self.w_drive + self.w_pass <= 0.0
        {
            return Err("holder weights must be non-negative with w_drive + w_pass > 0".into());
        }
        for (c, &m) in self.gap_mean.iter().enumerate() {
            if c != Category::ThrowIn.index() && !(m > 0.0 && m.is_finite()) {
                return Err(format!("gap_mean[{c}] must be positive"));
            }
        }
        if !(self.gap_shape > 0.0) || self.min_gap == 0 {
            return Err("gap_shape must be positive and min_gap at least 1".into());
        }
        if self.out_delay[0] == 0 || self.out_delay[0] > self.out_delay[1] {
            return Err("out_delay must be a non-empty range starting at 1 or later".into());
        }
        if self.pause_len[0] == 0 || self.pause_len[0] > self.pause_len[1] {
            return Err("pause_len must be a non-empty positive range".into());
        }
        if !(self.receiver_scale > 0.0) {
            return Err("receiver_scale must be positive".into());
        }
        Ok(())
    }
}

/// What the kernel needs to know at an event frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PlayState {
    pub frame: usize,
    /// `None` before kick-off.
    pub last: Option<EventRecord>,
    pub positions: [[f32; 2]; N_SLOTS],
    pub occupied: [bool; N_SLOTS],
    pub last_seen: [[Option<usize>; N_CATEGORIES]; N_SLOTS],
    /// Set when the returned event restarts play after an interruption.
    pub pause: Option<Pause>,
    /// Where the ball rests during `pause`.
    pub restart_spot: Option<[f32; 2]>,
}

impl PlayState {
    pub fn kickoff(positions: [[f32; 2]; N_SLOTS], occupied: [bool; N_SLOTS]) -> Self {
        Self {
            frame: 0,
            last: None,
            positions,
            occupied,
            last_seen: [[None; N_CATEGORIES]; N_SLOTS],
            pause: None,
            restart_spot: None,
        }
    }

    fn team_slots(&self, team: u8) -> impl Iterator<Item = usize> + '_ {
        let base = ROLES_PER_TEAM * team as usize;
        (base..base + ROLES_PER_TEAM).filter(move |&s| self.occupied[s])
    }

    fn nearest(
        &self,
        team: u8,
        point: [f32; 2],
        exclude: Option<usize>,
        outfield_only: bool,
    ) -> Option<usize> {
        self.team_slots(team)
            .filter(|&s| Some(s) != exclude)
            .filter(|&s| !outfield_only || s % ROLES_PER_TEAM != Role::Goalkeeper as usize)
            .min_by(|&a, &b| {
                dist(self.positions[a], point).total_cmp(&dist(self.positions[b], point))
            })
    }

    fn by_proximity<R: Rng + ?Sized>(
        &self,
        team: u8,
        from: usize,
        scale: f64,
        rng: &mut R,
    ) -> Option<usize> {
        let cands: Vec<(usize, f64)> = self
            .team_slots(team)
            .filter(|&s| s != from)
            .map(|s| {
                let gk = if s % ROLES_PER_TEAM == 0 { 0.2 } else { 1.0 };
                (
                    s,
                    gk * (-(dist(self.positions[s], self.positions[from]) as f64) / scale).exp(),
                )
            })
            .collect();
        let total: f64 = cands.iter().map(|c| c.1).sum();
        if cands.is_empty() || total <= 0.0 {
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        for &(s, w) in &cands {
            if u < w {
                return Some(s);
            }
            u -= w;
        }
        cands.last().map(|c| c.0)
    }
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// x-coordinate in the direction of `team`'s attack, 0 at its own goal line.
fn attack_x(team: u8, pos: [f32; 2]) -> f32 {
    if attack_direction(team) > 0.0 {
        pos[0]
    } else {
        1.0 - pos[0]
    }
}

fn opponent(team: u8) -> u8 {
    1 - team
}

fn box_spot(team: u8) -> [f32; 2] {
    if team == 0 {
        [0.9, 0.5]
    } else {
        [0.1, 0.5]
    }
}

enum Outcome {
    Hold(usize),
    Act(Category, usize),
    Out { restart_team: u8, goal_kick: bool },
}

fn holder_choice<R: Rng + ?Sized>(
    state: &PlayState,
    k: &KernelConfig,
    holder: usize,
    rng: &mut R,
) -> Category {
    if holder % ROLES_PER_TEAM == Role::Goalkeeper as usize {
        return Category::Pass;
    }
    let team = (holder / ROLES_PER_TEAM) as u8;
    let pos = state.positions[holder];
    let ax = attack_x(team, pos);
    let cross = if ax > 0.65 && (pos[1] - 0.5).abs() > 0.2 {
        k.w_cross
    } else {
        0.0
    };
    let shot = if ax > 2.0 / 3.0 { k.w_shot } else { 0.0 };
    let weights = [
        (Category::BallDrive, k.w_drive),
        (Category::Pass, k.w_pass),
        (Category::Cross, cross),
        (Category::Shot, shot),
    ];
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut u = rng.random::<f64>() * total;
    for (c, w) in weights {
        if u < w {
            return c;
        }
        u -= w;
    }
    Category::Pass
}

fn resolve<R: Rng + ?Sized>(state: &PlayState, k: &KernelConfig, rng: &mut R) -> Outcome {
    let Some(last) = state.last else {
        let cf = RoleId::new(0, Role::CentralForward).slot();
        let kicker = if state.occupied[cf] {
            cf
        } else {
            state.nearest(0, [0.5, 0.5], None, true).unwrap_or(0)
        };
        return Outcome::Act(Category::Pass, kicker);
    };
    let actor = last.actor.slot();
    let team = last.actor.team;
    let opp = opponent(team);
    let here = state.positions[actor];
    let near_opp = |s: &PlayState| s.nearest(opp, here, None, false).unwrap_or(actor);
    let u: f64 = rng.random();
    match last.category {
        Category::Pass => {
            if u < k.p_pass_out {
                Outcome::Out {
                    restart_team: opp,
                    goal_kick: rng.random::<f64>() < k.p_out_goal_kick,
                }
            } else if u < k.p_pass_out + k.p_pass_block {
                Outcome::Act(Category::BallBlock, near_opp(state))
            } else if u < k.p_pass_out + k.p_pass_block + k.p_intercept {
                let receiver = state
                    .by_proximity(opp, actor, k.receiver_scale * 2.0, rng)
                    .unwrap_or(actor);
                Outcome::Hold(receiver)
            } else {
                let receiver = state
                    .by_proximity(team, actor, k.receiver_scale, rng)
                    .unwrap_or(actor);
                if rng.random::<f64>() < k.p_pass_aerial {
                    let winner = if rng.random::<f64>() < k.p_aerial_contest {
                        state
                            .nearest(opp, state.positions[receiver], None, true)
                            .unwrap_or(receiver)
                    } else {
                        receiver
                    };
                    Outcome::Act(Category::Header, winner)
                } else {
                    Outcome::Hold(receiver)
                }
            }
        }
        Category::BallDrive => {
            if u < k.p_tackle {
                Outcome::Act(Category::Tackle, near_opp(state))
            } else if u < k.p_tackle + k.p_drive_out {
                Outcome::Out {
                    restart_team: opp,
                    goal_kick: rng.random::<f64>() < k.p_out_goal_kick,
                }
            } else {
                Outcome::Hold(actor)
            }
        }
        Category::Cross => {
            let target = box_spot(team);
            let own = k.p_cross_header_own;
            let opp_h = own + k.p_cross_header_opp;
            let block = opp_h + k.p_cross_block;
            let out = block + k.p_cross_out;
            if u < own {
                Outcome::Act(
                    Category::Header,
                    state
                        .nearest(team, target, Some(actor), true)
                        .unwrap_or(actor),
                )
            } else if u < opp_h {
                Outcome::Act(
                    Category::Header,
                    state.nearest(opp, target, None, true).unwrap_or(actor),
                )
            } else if u < block {
                Outcome::Act(Category::BallBlock, near_opp(state))
            } else if u < out {
                Outcome::Out {
                    restart_team: opp,
                    goal_kick: true,
                }
            } else {
                Outcome::Hold(state.nearest(opp, target, None, false).unwrap_or(actor))
            }
        }
        Category::Header => {
            let side = if rng.random::<f64>() < k.p_header_retain {
                team
            } else {
                opp
            };
            if u < k.p_header_header {
                Outcome::Act(
                    Category::Header,
                    state
                        .nearest(side, here, Some(actor), true)
                        .unwrap_or(actor),
                )
            } else if u < k.p_header_header + k.p_header_out {
                Outcome::Out {
                    restart_team: opp,
                    goal_kick: rng.random::<f64>() < k.p_out_goal_kick,
                }
            } else {
                Outcome::Hold(
                    state
                        .by_proximity(side, actor, k.receiver_scale, rng)
                        .unwrap_or(actor),
                )
            }
        }
        Category::ThrowIn => {
            let receiver = state
                .by_proximity(team, actor, k.receiver_scale, rng)
                .unwrap_or(actor);
            if u < k.p_throw_in_header {
                Outcome::Act(Category::Header, receiver)
            } else {
                Outcome::Hold(receiver)
            }
        }
        Category::BallBlock => {
            if u < k.p_block_retain {
                Outcome::Hold(actor)
            } else {
                Outcome::Hold(near_opp(state))
            }
        }
        Category::Shot => {
            if u < k.p_shot_block {
                Outcome::Act(Category::BallBlock, near_opp(state))
            } else {
                Outcome::Out {
                    restart_team: opp,
                    goal_kick: rng.random::<f64>() < k.p_shot_goal_kick,
                }
            }
        }
        Category::Tackle => Outcome::Hold(actor),
    }
}

fn sample_gap<R: Rng + ?Sized>(k: &KernelConfig, category: Category, rng: &mut R) -> usize {
    let mean = k.gap_mean[category.index()];
    let g = Gamma::new(k.gap_shape, mean / k.gap_shape).expect("validated gamma parameters");
    (g.sample(rng).round() as usize).max(k.min_gap)
}

/// Sample the next event and the state right after it.
pub fn next_event<R: Rng + ?Sized>(
    state: &PlayState,
    k: &KernelConfig,
    rng: &mut R,
) -> (EventRecord, PlayState) {
    let outcome = resolve(state, k, rng);
    let (category, slot, pause, spot) = match outcome {
        Outcome::Hold(h) => (holder_choice(state, k, h, rng), h, None, None),
        Outcome::Act(c, s) => (c, s, None, None),
        Outcome::Out {
            restart_team,
            goal_kick,
        } => {
            let from = state
                .last
                .map(|e| state.positions[e.actor.slot()])
                .unwrap_or([0.5, 0.5]);
            let start = state.frame + rng.random_range(k.out_delay[0]..=k.out_delay[1]);
            let end = start + rng.random_range(k.pause_len[0]..=k.pause_len[1]);
            let pause = Pause { start, end };
            let gk = RoleId::new(restart_team, Role::Goalkeeper).slot();
            if goal_kick && state.occupied[gk] {
                let x = if restart_team == 0 { 0.05 } else { 0.95 };
                (Category::Pass, gk, Some(pause), Some([x, 0.5]))
            } else {
                let spot = [
                    from[0].clamp(0.05, 0.95),
                    if from[1] < 0.5 { 0.0 } else { 1.0 },
                ];
                let thrower = state.nearest(restart_team, spot, None, true).unwrap_or(gk);
                (Category::ThrowIn, thrower, Some(pause), Some(spot))
            }
        }
    };

    let frame = match pause {
        Some(p) => p.end,
        None => {
            let mut frame = state.frame + sample_gap(k, category, rng);
            if let Some(last) = state.last {
                if last.category == Category::BallDrive
                    && category == Category::BallDrive
                    && last.actor.slot() == slot
                {
                    frame = frame.max(state.frame + k.drive_repeat_gap);
                }
            }
            frame
        }
    };
    let frame = match state.last_seen[slot][category.index()] {
        Some(prev) => frame.max(prev + k.same_key_gap),
        None => frame,
    };
    let frame = if state.last.is_some() {
        frame.max(state.frame + 1)
    } else {
        frame
    };

    let event = EventRecord {
        frame,
        category,
        actor: RoleId::from_slot(slot).expect("slot in range"),
    };
    let mut next = state.clone();
    next.frame = frame;
    next.last = Some(event);
    next.last_seen[slot][category.index()] = Some(frame);
    next.pause = pause;
    next.restart_spot = spot;
    (event, next)
}

#[cfg(test)]
mod tests {
    use super::super::motion::anchor;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state_after(category: Category, actor: RoleId) -> PlayState {
        let mut positions = [[0.0; 2]; N_SLOTS];
        let mut occupied = [true; N_SLOTS];
        for (s, p) in positions.iter_mut().enumerate() {
            *p = anchor(RoleId::from_slot(s).unwrap());
        }
        occupied[RoleId::new(0, Role::MidCenterBack).slot()] = false;
        occupied[RoleId::new(1, Role::MidCenterBack).slot()] = false;
        let mut s = PlayState::kickoff(positions, occupied);
        s.frame = 1000;
        s.last = Some(EventRecord {
            frame: 1000,
            category,
            actor,
        });
        s
    }

    #[test]
    fn cross_is_often_followed_by_header() {
        let state = state_after(Category::Cross, RoleId::new(0, Role::LeftWinger));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let headers = (0..n)
            .filter(|_| {
                next_event(&state, &KernelConfig::default(), &mut rng)
                    .0
                    .category
                    == Category::Header
            })
            .count();
        assert!(headers as f64 / n as f64 >= 0.3, "{headers}");
    }

    #[test]
    fn completed_pass_stays_with_team() {
        let k = KernelConfig {
            p_pass_out: 0.0,
            p_pass_block: 0.0,
            p_intercept: 0.0,
            p_pass_aerial: 0.0,
            ..Default::default()
        };
        let state = state_after(Category::Pass, RoleId::new(1, Role::DefensiveMidfielder));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let (e, _) = next_event(&state, &k, &mut rng);
            assert_eq!(e.actor.team, 1);
            assert!(state.occupied[e.actor.slot()]);
        }
    }

    #[test]
    fn shot_leads_to_pause_and_opposing_restart() {
        let k = KernelConfig {
            p_shot_block: 0.0,
            ..Default::default()
        };
        let state = state_after(Category::Shot, RoleId::new(0, Role::CentralForward));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut saw = [false; 2];
        for _ in 0..500 {
            let (e, next) = next_event(&state, &k, &mut rng);
            let pause = next.pause.expect("restart follows a pause");
            assert_eq!(e.frame, pause.end);
            assert!(pause.start > state.frame);
            assert_eq!(e.actor.team, 1);
            match e.category {
                Category::Pass => {
                    assert_eq!(e.actor.role(), Role::Goalkeeper);
                    saw[0] = true;
                }
                Category::ThrowIn => saw[1] = true,
                other => panic!("unexpected restart {other}"),
            }
        }
        assert_eq!(saw, [true, true]);
    }

    #[test]
    fn shots_only_from_attacking_third() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = KernelConfig {
            w_shot: 10.0,
            ..Default::default()
        };
        let state = state_after(Category::Tackle, RoleId::new(0, Role::DefensiveMidfielder));
        for _ in 0..2000 {
            let (e, _) = next_event(&state, &k, &mut rng);
            assert_ne!(e.category, Category::Shot);
        }
        let state = state_after(Category::Tackle, RoleId::new(0, Role::CentralForward));
        let shots = (0..2000)
            .filter(|_| next_event(&state, &k, &mut rng).0.category == Category::Shot)
            .count();
        assert!(shots > 1000);
    }

    #[test]
    fn drive_repeats_are_spaced() {
        let state = state_after(
            Category::BallDrive,
            RoleId::new(0, Role::AttackingMidfielder),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let (e, _) = next_event(&state, &KernelConfig::default(), &mut rng);
            if e.category == Category::BallDrive && e.actor == state.last.unwrap().actor {
                assert!(e.frame >= state.frame + 20);
            }
            assert!(e.frame >= state.frame + 1);
        }
    }
}
