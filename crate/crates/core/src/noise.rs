//! Detector emulation: ground truth in, raw per-frame logits out.

use crate::sim::{Category, MatchGroundTruth, Pause, N_CATEGORIES, N_SLOTS, ROLES_PER_TEAM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

/// Categories per slot including background at index 0.
pub const CUBE_CLASSES: usize = N_CATEGORIES + 1;
pub const BACKGROUND_LOGIT: f32 = 2.0;
pub const ACTION_LOGIT: f32 = -4.0;

/// Unnormalized scores `[frames, 26, 9]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitCube {
    n_frames: usize,
    values: Vec<f32>,
}

impl LogitCube {
    pub fn baseline(n_frames: usize) -> Self {
        let mut values = vec![ACTION_LOGIT; n_frames * N_SLOTS * CUBE_CLASSES];
        for chunk in values.chunks_mut(CUBE_CLASSES) {
            chunk[0] = BACKGROUND_LOGIT;
        }
        Self { n_frames, values }
    }

    pub fn from_values(n_frames: usize, values: Vec<f32>) -> Option<Self> {
        (values.len() == n_frames * N_SLOTS * CUBE_CLASSES).then_some(Self { n_frames, values })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_frames, N_SLOTS, CUBE_CLASSES]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    fn index(frame: usize, slot: usize, class: usize) -> usize {
        (frame * N_SLOTS + slot) * CUBE_CLASSES + class
    }

    pub fn get(&self, frame: usize, slot: usize, class: usize) -> f32 {
        self.values[Self::index(frame, slot, class)]
    }

    /// The 234 values of one frame, slot-major.
    pub fn frame(&self, frame: usize) -> &[f32] {
        let w = N_SLOTS * CUBE_CLASSES;
        &self.values[frame * w..(frame + 1) * w]
    }

    /// Add `amplitude * max(0, 1 - |t - center| / halfwidth)` to one line,
    /// clipped at the match bounds. `center` may lie outside them.
    pub fn bump(
        &mut self,
        slot: usize,
        class: usize,
        center: i64,
        amplitude: f32,
        halfwidth: usize,
    ) {
        assert!(halfwidth >= 1, "bump halfwidth must be at least 1");
        let h = halfwidth as i64;
        let lo = (center - h + 1).max(0);
        let hi = (center + h - 1).min(self.n_frames as i64 - 1);
        for t in lo..=hi {
            let w = 1.0 - (t - center).abs() as f32 / halfwidth as f32;
            self.values[Self::index(t as usize, slot, class)] += amplitude * w;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub sigma_logit: f64,
    pub amp_mean: [f64; N_CATEGORIES],
    pub amp_sd: [f64; N_CATEGORIES],
    pub kernel_halfwidth: usize,
    pub jitter_sd: f64,
    pub p_miss: [f64; N_CATEGORIES],
    /// Row `i`: probability of a secondary bump on category `j` for a true `i`.
    pub confusion: [[f64; N_CATEGORIES]; N_CATEGORIES],
    /// Probability of a secondary bump on the nearest opposing player.
    pub p_nearest_opponent: f64,
    /// Secondary amplitude as a fraction of the primary one.
    pub secondary_scale: f64,
    /// Expected spurious bumps per occupied slot per 1000 frames.
    pub fp_rate: f64,
    /// Spurious rate multiplier while the ball is out of play.
    pub pause_fp_multiplier: f64,
    pub fp_amp_mean: f64,
    pub fp_amp_sd: f64,
    pub fp_category_weights: [f64; N_CATEGORIES],
    /// Miss probability grows to `p_miss * (1 + s)` for an invisible actor.
    pub visibility_suppression: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let mut confusion = [[0.0; N_CATEGORIES]; N_CATEGORIES];
        let hard = [Category::Header, Category::BallBlock, Category::Tackle].map(Category::index);
        for &i in &hard {
            for &j in &hard {
                if i != j {
                    confusion[i][j] = 0.3;
                }
            }
        }
        let (pass, cross, drive) = (
            Category::Pass.index(),
            Category::Cross.index(),
            Category::BallDrive.index(),
        );
        confusion[pass][cross] = 0.25;
        confusion[cross][pass] = 0.4;
        confusion[pass][drive] = 0.15;
        confusion[drive][pass] = 0.15;
        confusion[Category::Shot.index()][pass] = 0.3;
        confusion[Category::ThrowIn.index()][pass] = 0.3;
        Self {
            sigma_logit: 0.8,
            amp_mean: [9.0, 8.5, 7.5, 8.5, 9.0, 7.0, 8.5, 7.0],
            amp_sd: [1.5; N_CATEGORIES],
            kernel_halfwidth: 6,
            jitter_sd: 1.0,
            p_miss: [0.15, 0.2, 0.3, 0.2, 0.1, 0.35, 0.2, 0.35],
            confusion,
            p_nearest_opponent: 0.3,
            secondary_scale: 0.75,
            fp_rate: 1.0,
            pause_fp_multiplier: 3.0,
            fp_amp_mean: 7.0,
            fp_amp_sd: 1.5,
            fp_category_weights: [0.3, 0.25, 0.1, 0.05, 0.02, 0.12, 0.04, 0.12],
            visibility_suppression: 1.0,
        }
    }
}

impl NoiseConfig {
    /// Every event becomes a clean bump on its own line; nothing else.
    pub fn zero_noise() -> Self {
        Self {
            sigma_logit: 0.0,
            amp_sd: [0.0; N_CATEGORIES],
            jitter_sd: 0.0,
            p_miss: [0.0; N_CATEGORIES],
            confusion: [[0.0; N_CATEGORIES]; N_CATEGORIES],
            p_nearest_opponent: 0.0,
            fp_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be finite and non-negative, got {v}"))
            }
        };
        finite_nonneg("sigma_logit", self.sigma_logit)?;
        finite_nonneg("jitter_sd", self.jitter_sd)?;
        finite_nonneg("fp_rate", self.fp_rate)?;
        finite_nonneg("pause_fp_multiplier", self.pause_fp_multiplier)?;
        finite_nonneg("fp_amp_sd", self.fp_amp_sd)?;
        finite_nonneg("secondary_scale", self.secondary_scale)?;
        finite_nonneg("visibility_suppression", self.visibility_suppression)?;
        if !self.fp_amp_mean.is_finite() {
            return Err("fp_amp_mean must be finite".into());
        }
        if self.kernel_halfwidth == 0 {
            return Err("kernel_halfwidth must be at least 1".into());
        }
        for c in 0..N_CATEGORIES {
            if !self.amp_mean[c].is_finite() {
                return Err(format!("amp_mean[{c}] must be finite"));
            }
            finite_nonneg("amp_sd", self.amp_sd[c])?;
            finite_nonneg("fp_category_weights", self.fp_category_weights[c])?;
            if !(0.0..=1.0).contains(&self.p_miss[c]) {
                return Err(format!(
                    "p_miss[{c}] = {} is not a probability",
                    self.p_miss[c]
                ));
            }
            let row = &self.confusion[c];
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || row.iter().sum::<f64>() > 1.0 + 1e-9
            {
                return Err(format!(
                    "confusion row {c} must hold probabilities summing to at most 1"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.p_nearest_opponent) {
            return Err("p_nearest_opponent is not a probability".into());
        }
        if self.fp_rate > 0.0 && self.fp_category_weights.iter().sum::<f64>() <= 0.0 {
            return Err("spurious bumps need a positive category weight".into());
        }
        Ok(())
    }
}

fn sample_category<R: Rng + ?Sized>(weights: &[f64; N_CATEGORIES], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    N_CATEGORIES - 1
}

fn nearest_opponent(gt: &MatchGroundTruth, slot: usize, frame: usize) -> Option<usize> {
    let team = slot / ROLES_PER_TEAM;
    let other = 1 - team;
    let (x, y) = (gt.tracks[slot].x[frame], gt.tracks[slot].y[frame]);
    (other * ROLES_PER_TEAM..(other + 1) * ROLES_PER_TEAM)
        .filter(|&s| gt.tracks[s].occupied[frame])
        .min_by(|&a, &b| {
            let da = (gt.tracks[a].x[frame] - x).powi(2) + (gt.tracks[a].y[frame] - y).powi(2);
            let db = (gt.tracks[b].x[frame] - x).powi(2) + (gt.tracks[b].y[frame] - y).powi(2);
            da.total_cmp(&db)
        })
}

fn paused_frames(pauses: &[Pause], n: usize) -> usize {
    pauses
        .iter()
        .map(|p| p.end.min(n).saturating_sub(p.start))
        .sum()
}

/// Deterministic in `(gt, config, seed)`.
pub fn corrupt_match(
    gt: &MatchGroundTruth,
    config: &NoiseConfig,
    seed: u64,
) -> Result<LogitCube, String> {
    config.validate()?;
    let n = gt.n_frames;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cube = LogitCube::baseline(n);
    let hw = config.kernel_halfwidth;

    for e in &gt.events {
        let c = e.category.index();
        let slot = e.actor.slot();
        let visible = gt.tracks[slot].visible[e.frame];
        let factor = if visible {
            1.0
        } else {
            1.0 + config.visibility_suppression
        };
        if rng.random::<f64>() < (config.p_miss[c] * factor).min(1.0) {
            continue;
        }
        let jitter = if config.jitter_sd > 0.0 {
            (config.jitter_sd * rng.sample::<f64, _>(StandardNormal)).round() as i64
        } else {
            0
        };
        let center = e.frame as i64 + jitter;
        let amp = config.amp_mean[c] + config.amp_sd[c] * rng.sample::<f64, _>(StandardNormal);
        cube.bump(slot, c + 1, center, amp as f32, hw);

        let row = &config.confusion[c];
        if row.iter().sum::<f64>() > 0.0 {
            let mut u = rng.random::<f64>();
            for (j, &p) in row.iter().enumerate() {
                if u < p {
                    let scale = config.secondary_scale * (0.7 + 0.6 * rng.random::<f64>());
                    cube.bump(slot, j + 1, center, (amp * scale) as f32, hw);
                    break;
                }
                u -= p;
            }
        }
        if config.p_nearest_opponent > 0.0 && rng.random::<f64>() < config.p_nearest_opponent {
            if let Some(other) = nearest_opponent(gt, slot, e.frame) {
                let scale = config.secondary_scale * (0.7 + 0.6 * rng.random::<f64>());
                let offset = rng.random_range(-2i64..=2);
                cube.bump(other, c + 1, center + offset, (amp * scale) as f32, hw);
            }
        }
    }

    if config.fp_rate > 0.0 {
        let paused = paused_frames(&gt.pauses, n);
        let amp = Normal::new(config.fp_amp_mean, config.fp_amp_sd).map_err(|e| e.to_string())?;
        for slot in 0..N_SLOTS {
            let occupied: Vec<usize> = (0..n).filter(|&f| gt.tracks[slot].occupied[f]).collect();
            if occupied.is_empty() {
                continue;
            }
            let play_frames = occupied.len().saturating_sub(paused) as f64;
            let expected = config.fp_rate / 1000.0
                * (play_frames + config.pause_fp_multiplier * paused as f64);
            if expected <= 0.0 {
                continue;
            }
            let count = Poisson::new(expected)
                .map_err(|e| e.to_string())?
                .sample(&mut rng) as usize;
            // Frames are drawn with pauses over-weighted by rejection.
            let accept_play = 1.0 / config.pause_fp_multiplier.max(1.0);
            let accept_pause = config.pause_fp_multiplier / config.pause_fp_multiplier.max(1.0);
            let mut placed = 0;
            while placed < count {
                let f = occupied[rng.random_range(0..occupied.len())];
                let accept = if crate::sim::in_pause(&gt.pauses, f) {
                    accept_pause
                } else {
                    accept_play
                };
                if rng.random::<f64>() >= accept {
                    continue;
                }
                let c = sample_category(&config.fp_category_weights, &mut rng);
                cube.bump(slot, c + 1, f as i64, amp.sample(&mut rng) as f32, hw);
                placed += 1;
            }
        }
    }

    if config.sigma_logit > 0.0 {
        let noise = Normal::new(0.0, config.sigma_logit).map_err(|e| e.to_string())?;
        for v in cube.values.iter_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    Ok(cube)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_match, SimConfig};

    #[test]
    fn bump_shape_and_clipping() {
        let mut cube = LogitCube::baseline(40);
        cube.bump(3, 2, 20, 6.0, 5);
        assert_eq!(cube.get(20, 3, 2), ACTION_LOGIT + 6.0);
        assert_eq!(cube.get(25, 3, 2), ACTION_LOGIT);
        assert_eq!(cube.get(15, 3, 2), ACTION_LOGIT);
        assert!((cube.get(22, 3, 2) - (ACTION_LOGIT + 6.0 * 0.6)).abs() < 1e-6);
        cube.bump(3, 2, 22, 1.0, 5);
        assert!((cube.get(22, 3, 2) - (ACTION_LOGIT + 3.6 + 1.0)).abs() < 1e-6);

        let mut cube = LogitCube::baseline(40);
        cube.bump(0, 1, 0, 6.0, 5);
        let changed: Vec<usize> = (0..40)
            .filter(|&f| cube.get(f, 0, 1) != ACTION_LOGIT)
            .collect();
        assert_eq!(changed, vec![0, 1, 2, 3, 4]);
        assert!(changed.iter().all(|&f| f <= 5));
    }

    #[test]
    fn noiseless_argmax_recovers_category() {
        let gt = simulate_match(&SimConfig::with_frames(6000), 4).unwrap();
        let cube = corrupt_match(&gt, &NoiseConfig::zero_noise(), 0).unwrap();
        assert!(!gt.events.is_empty());
        for e in &gt.events {
            let line: Vec<f32> = (0..CUBE_CLASSES)
                .map(|k| cube.get(e.frame, e.actor.slot(), k))
                .collect();
            let best = (0..CUBE_CLASSES)
                .max_by(|&a, &b| line[a].total_cmp(&line[b]))
                .unwrap();
            assert_eq!(best, e.category.index() + 1, "{e:?} {line:?}");
        }
    }

    #[test]
    fn unoccupied_slots_hold_baseline_without_gaussian_noise() {
        let gt = simulate_match(&SimConfig::with_frames(3000), 1).unwrap();
        let config = NoiseConfig {
            sigma_logit: 0.0,
            ..NoiseConfig::default()
        };
        let cube = corrupt_match(&gt, &config, 9).unwrap();
        let empty: Vec<usize> = (0..N_SLOTS)
            .filter(|&s| gt.tracks[s].occupied.iter().all(|o| !o))
            .collect();
        assert!(!empty.is_empty());
        for s in empty {
            for f in 0..gt.n_frames {
                assert_eq!(cube.get(f, s, 0), BACKGROUND_LOGIT);
                assert!((1..CUBE_CLASSES).all(|k| cube.get(f, s, k) == ACTION_LOGIT));
            }
        }
    }

    #[test]
    fn total_miss_leaves_baseline_plus_noise() {
        let gt = simulate_match(&SimConfig::with_frames(3000), 2).unwrap();
        let config = NoiseConfig {
            p_miss: [1.0; N_CATEGORIES],
            fp_rate: 0.0,
            ..NoiseConfig::default()
        };
        let cube = corrupt_match(&gt, &config, 3).unwrap();
        let mean: f64 = (0..gt.n_frames)
            .map(|f| cube.get(f, 5, 1) as f64)
            .sum::<f64>()
            / gt.n_frames as f64;
        assert!((mean - ACTION_LOGIT as f64).abs() < 0.1);
        for chunk in cube.values().chunks(CUBE_CLASSES) {
            assert!(chunk[1..].iter().all(|&v| v < 1.0));
        }
    }

    #[test]
    fn deterministic_and_finite() {
        let gt = simulate_match(&SimConfig::with_frames(2000), 5).unwrap();
        let a = corrupt_match(&gt, &NoiseConfig::default(), 1).unwrap();
        assert_eq!(a, corrupt_match(&gt, &NoiseConfig::default(), 1).unwrap());
        assert!(a.is_finite());
        assert_eq!(a.shape(), [2000, 26, 9]);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = NoiseConfig::default();
        c.confusion[0] = [0.5; N_CATEGORIES];
        assert!(c.validate().is_err());
        let c = NoiseConfig {
            kernel_halfwidth: 0,
            ..NoiseConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
