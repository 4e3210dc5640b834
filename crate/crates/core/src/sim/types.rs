use serde::{Deserialize, Serialize};
use std::fmt;

pub const FPS: u32 = 25;
pub const ROLES_PER_TEAM: usize = 13;
pub const N_SLOTS: usize = 2 * ROLES_PER_TEAM;
pub const N_CATEGORIES: usize = 8;
/// Players a team fields at once; two of its thirteen role slots stay empty.
pub const PLAYERS_PER_TEAM: usize = 11;

/// Canonical role order used for slot concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Goalkeeper,
    LeftBack,
    LeftCenterBack,
    MidCenterBack,
    RightCenterBack,
    LeftMidfielder,
    RightMidfielder,
    DefensiveMidfielder,
    AttackingMidfielder,
    LeftWinger,
    RightWinger,
    CentralForward,
    RightBack,
}

impl Role {
    pub const ALL: [Role; ROLES_PER_TEAM] = [
        Role::Goalkeeper,
        Role::LeftBack,
        Role::LeftCenterBack,
        Role::MidCenterBack,
        Role::RightCenterBack,
        Role::LeftMidfielder,
        Role::RightMidfielder,
        Role::DefensiveMidfielder,
        Role::AttackingMidfielder,
        Role::LeftWinger,
        Role::RightWinger,
        Role::CentralForward,
        Role::RightBack,
    ];

    pub fn rank(self) -> u8 {
        self as u8
    }

    pub fn from_rank(rank: u8) -> Option<Role> {
        Self::ALL.get(rank as usize).copied()
    }

    pub fn abbreviation(self) -> &'static str {
        [
            "GK", "LB", "LCB", "MCB", "RCB", "LM", "RM", "DM", "AM", "LW", "RW", "CF", "RB",
        ][self as usize]
    }
}

/// A role on a team. Team 0 attacks from the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoleId {
    pub team: u8,
    pub role_rank: u8,
}

impl RoleId {
    pub fn new(team: u8, role: Role) -> Self {
        Self {
            team,
            role_rank: role.rank(),
        }
    }

    pub fn is_valid(self) -> bool {
        self.team < 2 && (self.role_rank as usize) < ROLES_PER_TEAM
    }

    pub fn role(self) -> Role {
        Role::from_rank(self.role_rank).expect("valid role rank")
    }

    pub fn slot(self) -> usize {
        ROLES_PER_TEAM * self.team as usize + self.role_rank as usize
    }

    pub fn from_slot(slot: usize) -> Option<Self> {
        (slot < N_SLOTS).then(|| Self {
            team: (slot / ROLES_PER_TEAM) as u8,
            role_rank: (slot % ROLES_PER_TEAM) as u8,
        })
    }
}

impl fmt::Display for RoleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}-{}", self.team, self.role().abbreviation())
    }
}

/// On-the-ball action, in report row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Pass,
    BallDrive,
    Header,
    Cross,
    ThrowIn,
    BallBlock,
    Shot,
    Tackle,
}

impl Category {
    pub const ALL: [Category; N_CATEGORIES] = [
        Category::Pass,
        Category::BallDrive,
        Category::Header,
        Category::Cross,
        Category::ThrowIn,
        Category::BallBlock,
        Category::Shot,
        Category::Tackle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Category> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        [
            "pass",
            "ball-drive",
            "header",
            "cross",
            "throw-in",
            "ball-block",
            "shot",
            "tackle",
        ][self as usize]
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-frame state of one role slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlayerTrack {
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    /// Pitch units per second.
    pub vx: Vec<f32>,
    pub vy: Vec<f32>,
    pub visible: Vec<bool>,
    pub occupied: Vec<bool>,
}

impl PlayerTrack {
    pub fn with_len(n: usize) -> Self {
        Self {
            x: vec![0.0; n],
            y: vec![0.0; n],
            vx: vec![0.0; n],
            vy: vec![0.0; n],
            visible: vec![false; n],
            occupied: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub frame: usize,
    pub category: Category,
    pub actor: RoleId,
}

/// Half-open frame interval `[start, end)` with the ball out of play.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pause {
    pub start: usize,
    pub end: usize,
}

impl Pause {
    pub fn contains(&self, frame: usize) -> bool {
        self.start <= frame && frame < self.end
    }
}

pub fn in_pause(pauses: &[Pause], frame: usize) -> bool {
    pauses.iter().any(|p| p.contains(frame))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchGroundTruth {
    pub n_frames: usize,
    pub fps: u32,
    /// Indexed by slot.
    pub tracks: Vec<PlayerTrack>,
    /// Sorted by frame, at most one per frame.
    pub events: Vec<EventRecord>,
    pub pauses: Vec<Pause>,
}

impl MatchGroundTruth {
    pub fn events_in(&self, start: usize, end: usize) -> &[EventRecord] {
        let lo = self.events.partition_point(|e| e.frame < start);
        let hi = self.events.partition_point(|e| e.frame < end);
        &self.events[lo..hi]
    }

    pub fn occupied_count(&self, team: u8, frame: usize) -> usize {
        (0..ROLES_PER_TEAM)
            .filter(|&r| self.tracks[ROLES_PER_TEAM * team as usize + r].occupied[frame])
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_layout() {
        assert_eq!(RoleId::new(0, Role::Goalkeeper).slot(), 0);
        assert_eq!(RoleId::new(1, Role::Goalkeeper).slot(), 13);
        assert_eq!(RoleId::new(0, Role::RightBack).slot(), 12);
        assert_eq!(RoleId::new(1, Role::RightBack).slot(), 25);
        for s in 0..N_SLOTS {
            assert_eq!(RoleId::from_slot(s).unwrap().slot(), s);
        }
        assert!(RoleId::from_slot(26).is_none());
    }

    #[test]
    fn category_names_round_trip() {
        for c in Category::ALL {
            assert_eq!(Category::from_name(c.name()), Some(c));
            assert_eq!(Category::from_index(c.index()), Some(c));
        }
        assert_eq!(
            serde_json::to_string(&Category::BallDrive).unwrap(),
            "\"ball-drive\""
        );
    }
}
