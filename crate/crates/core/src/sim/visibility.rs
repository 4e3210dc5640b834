use super::types::{Category, EventRecord, PlayerTrack, FPS};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilityConfig {
    /// Probability per visible frame that a tracking dropout starts.
    pub dropout_rate: f64,
    /// Mean dropout length in frames.
    pub mean_length: f64,
    /// Rate multiplier for the actor near a header, ball-block or tackle.
    pub event_multiplier: f64,
    pub event_window: usize,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.002,
            mean_length: FPS as f64,
            event_multiplier: 4.0,
            event_window: 10,
        }
    }
}

impl VisibilityConfig {
    pub fn validate(&self) -> Result<(), String> {
        let rate = self.dropout_rate * self.event_multiplier.max(1.0);
        if !(0.0..=1.0).contains(&self.dropout_rate) || !(0.0..=1.0).contains(&rate) {
            return Err(format!(
                "dropout rate {} (x{}) is not a probability",
                self.dropout_rate, self.event_multiplier
            ));
        }
        if !(self.mean_length >= 1.0) {
            return Err("mean dropout length must be at least one frame".into());
        }
        Ok(())
    }
}

fn occluding(c: Category) -> bool {
    matches!(c, Category::Header | Category::BallBlock | Category::Tackle)
}

/// Fill `visible` from `occupied` with random dropout intervals.
pub fn visibility_process<R: Rng + ?Sized>(
    tracks: &mut [PlayerTrack],
    events: &[EventRecord],
    config: &VisibilityConfig,
    rng: &mut R,
) {
    let p_end = 1.0 / config.mean_length;
    for (slot, track) in tracks.iter_mut().enumerate() {
        let n = track.len();
        let mut boost = vec![false; n];
        for e in events
            .iter()
            .filter(|e| e.actor.slot() == slot && occluding(e.category))
        {
            let lo = e.frame.saturating_sub(config.event_window);
            let hi = (e.frame + config.event_window + 1).min(n);
            boost[lo..hi.max(lo)].iter_mut().for_each(|b| *b = true);
        }
        let mut dropped = false;
        for f in 0..n {
            if !track.occupied[f] {
                track.visible[f] = false;
                dropped = false;
                continue;
            }
            if dropped {
                dropped = rng.random::<f64>() >= p_end;
            } else if config.dropout_rate > 0.0 {
                let rate = if boost[f] {
                    config.dropout_rate * config.event_multiplier
                } else {
                    config.dropout_rate
                };
                dropped = rng.random::<f64>() < rate;
            }
            track.visible[f] = !dropped;
        }
    }
}
