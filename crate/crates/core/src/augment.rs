//! SpecAugment-style time and frequency masking (no time warping).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::FeatureSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub num_time_masks: usize,
    /// Upper bound on a time mask, in frames.
    pub max_time_mask_width: usize,
    pub num_freq_masks: usize,
    /// Upper bound on a frequency mask, in feature bins.
    pub max_freq_mask_width: usize,
    pub mask_value: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            num_time_masks: 2,
            max_time_mask_width: 10,
            num_freq_masks: 2,
            max_freq_mask_width: 4,
            mask_value: 0.0,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    /// Masks `features` in place of a copy. Each mask draws a width in
    /// `0..=max` (clamped to the axis length) and then a start so that the
    /// band stays inside the sequence.
    pub fn apply<R: Rng + ?Sized>(&self, features: &FeatureSequence, rng: &mut R) -> FeatureSequence {
        let mut out = features.clone();
        if !self.enabled {
            return out;
        }
        let (frames, bins) = out.values().dim();
        let data = out.values_mut();
        if self.max_time_mask_width > 0 {
            for _ in 0..self.num_time_masks {
                let (start, width) = draw_band(rng, frames, self.max_time_mask_width);
                data.slice_mut(ndarray::s![start..start + width, ..]).fill(self.mask_value);
            }
        }
        if self.max_freq_mask_width > 0 {
            for _ in 0..self.num_freq_masks {
                let (start, width) = draw_band(rng, bins, self.max_freq_mask_width);
                data.slice_mut(ndarray::s![.., start..start + width]).fill(self.mask_value);
            }
        }
        out
    }
}

fn draw_band<R: Rng + ?Sized>(rng: &mut R, len: usize, max_width: usize) -> (usize, usize) {
    let width = rng.random_range(0..=max_width).min(len);
    let start = rng.random_range(0..=len - width);
    (start, width)
}
