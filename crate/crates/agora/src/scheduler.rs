//! Weight tiers and the per-round weight schedule.
//!
//! Weights live in [0, 2] and are discretized into three tiers with
//! half-open boundaries: low [0, 0.85), mid [0.85, 1.25), high [1.25, 2].
//! The schedule is stateless: every round is computed from the initial
//! weights, so corrections never compound across rounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BehaviorFeedback, Tier, WeightVector};

/// Lower bounds of the mid and high tiers.
pub const TIER_MID_FROM: f64 = 0.85;
pub const TIER_HIGH_FROM: f64 = 1.25;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("weight {0} outside [0,2]")]
    WeightOutOfRange(f64),
}

/// Maps a weight to its tier. Values outside [0, 2] (including NaN) are an
/// error rather than a silent clamp.
pub fn tier_of(w: f64) -> Result<Tier, SchedulerError> {
    if !(WeightVector::RANGE.0..=WeightVector::RANGE.1).contains(&w) {
        return Err(SchedulerError::WeightOutOfRange(w));
    }
    Ok(if w < TIER_MID_FROM {
        Tier::Low
    } else if w < TIER_HIGH_FROM {
        Tier::Mid
    } else {
        Tier::High
    })
}

/// Tiers for all three components in (T, M, D) order.
pub fn tier_triple(w: &WeightVector) -> Result<(Tier, Tier, Tier), SchedulerError> {
    Ok((tier_of(w.t)?, tier_of(w.m)?, tier_of(w.d)?))
}

/// Settings for the adaptive weight schedule. `trend` drifts emphasis from
/// evidence toward discussion memory as rounds progress; `alpha` is the
/// one-round boost applied when the previous round missed a behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub trend: bool,
    pub trend_step: f64,
    pub cap: f64,
    pub d_floor: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            alpha: 0.2,
            trend: true,
            trend_step: 0.1,
            cap: 2.0,
            d_floor: 0.5,
        }
    }
}

/// The deterministic drift component alone: memory emphasis rises by
/// `trend_step` per round up to `cap`, evidence emphasis falls by the same
/// step down to `d_floor`, persona emphasis stays fixed.
pub fn trend_weights(initial: &WeightVector, round: u32, cfg: &AdaptiveConfig) -> WeightVector {
    let k = round as f64;
    WeightVector {
        t: initial.t,
        m: (initial.m + cfg.trend_step * k).min(cfg.cap),
        d: (initial.d - cfg.trend_step * k).max(cfg.d_floor),
    }
}

/// Weights the agent uses in `round` (1-based). Always computed fresh from
/// the initial vector: trend first, then a single correction derived from
/// the previous round's behaviour, so a missed behaviour influences exactly
/// one round.
pub fn weights_for_round(
    initial: &WeightVector,
    round: u32,
    feedback: Option<BehaviorFeedback>,
    cfg: &AdaptiveConfig,
) -> WeightVector {
    if !cfg.enabled {
        return *initial;
    }
    let mut w = if cfg.trend {
        trend_weights(initial, round, cfg)
    } else {
        *initial
    };
    if let Some(fb) = feedback {
        if !fb.used_evidence {
            w.d = (w.d + cfg.alpha).min(cfg.cap);
        }
        if !fb.responded_to_memory {
            w.m = (w.m + cfg.alpha).min(cfg.cap);
        }
    }
    w
}
