//! Span masks over time steps.
//!
//! A proportion `p` of all time steps is drawn without replacement as span
//! starts, and the `m` steps beginning at each start are masked. Spans may
//! overlap and are clipped at the end of the sequence.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-frame mask for one utterance. `mask[t]` is true when frame `t` is
/// replaced by the mask embedding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    starts: Vec<usize>,
    mask: Vec<bool>,
}

impl MaskPlan {
    /// Builds the plan covering `[s, min(s + span, len))` for every start.
    pub fn from_starts(len: usize, mut starts: Vec<usize>, span: usize) -> Result<Self> {
        starts.sort_unstable();
        starts.dedup();
        if let Some(&s) = starts.iter().find(|&&s| s >= len) {
            return Err(Error::InvalidArgument(format!(
                "span start {} outside {} frames",
                s, len
            )));
        }
        let mut mask = vec![false; len];
        for &s in &starts {
            mask[s..(s + span).min(len)]
                .iter_mut()
                .for_each(|m| *m = true);
        }
        Ok(MaskPlan { starts, mask })
    }

    /// Plan from explicit flags; starts are the first frame of each masked run.
    pub fn from_flags(mask: Vec<bool>) -> Self {
        let starts = (0..mask.len())
            .filter(|&t| mask[t] && (t == 0 || !mask[t - 1]))
            .collect();
        MaskPlan { starts, mask }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn coverage(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.mask.len() as f64
        }
    }
}

/// Number of span starts drawn for `frames` frames: `max(1, round(p·T))`,
/// capped at `T`.
pub fn start_count(frames: usize, p: f64) -> usize {
    ((p * frames as f64).round() as usize).clamp(1, frames)
}

fn validate(p: f64, span: usize) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask proportion must be in (0, 1], got {}",
            p
        )));
    }
    if span == 0 {
        return Err(Error::InvalidArgument(
            "mask span length must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Draws a span mask for `frames` frames.
pub fn sample_mask<R: Rng + ?Sized>(
    frames: usize,
    p: f64,
    span: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    validate(p, span)?;
    if frames == 0 {
        return Err(Error::InvalidArgument(
            "cannot mask an empty sequence".into(),
        ));
    }
    let starts = index::sample(rng, frames, start_count(frames, p)).into_vec();
    MaskPlan::from_starts(frames, starts, span)
}

/// `1 - (1 - p)^m`: the covered fraction if every frame started a span
/// independently with probability `p`. Close to the without-replacement
/// sampler for long sequences and small `p·m`.
pub fn expected_coverage(p: f64, span: usize) -> f64 {
    1.0 - (1.0 - p).powi(span as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn short_sequence_gets_one_span() {
        for seed in 0..50 {
            let plan = sample_mask(10, 0.1, 3, &mut stream(seed, &["t"])).unwrap();
            assert_eq!(plan.starts().len(), 1);
            assert!((1..=3).contains(&plan.masked_count()));
        }
    }

    #[test]
    fn explicit_plan() {
        let plan = MaskPlan::from_starts(5, vec![3, 0], 2).unwrap();
        assert_eq!(plan.mask(), &[true, true, false, true, true]);
        assert_eq!(plan.starts(), &[0, 3]);
        let clipped = MaskPlan::from_starts(5, vec![4], 3).unwrap();
        assert_eq!(clipped.masked_count(), 1);
        assert!(MaskPlan::from_starts(5, vec![5], 1).is_err());
        assert_eq!(
            MaskPlan::from_flags(vec![false, true, true, false, true]).starts(),
            &[1, 4]
        );
    }

    #[test]
    fn invalid_parameters() {
        let mut rng = stream(0, &["t"]);
        assert!(sample_mask(10, 0.0, 3, &mut rng).is_err());
        assert!(sample_mask(10, 1.5, 3, &mut rng).is_err());
        assert!(sample_mask(10, 0.5, 0, &mut rng).is_err());
        assert!(sample_mask(0, 0.5, 1, &mut rng).is_err());
    }

    #[test]
    fn closed_form_values() {
        assert!((expected_coverage(0.065, 10) - 0.489358).abs() < 1e-6);
        assert!((expected_coverage(0.065, 1) - 0.065).abs() < 1e-15);
        assert_eq!(expected_coverage(1.0, 1), 1.0);
    }

    #[test]
    fn start_count_rounding() {
        assert_eq!(start_count(1000, 0.065), 65);
        assert_eq!(start_count(3, 0.065), 1);
        assert_eq!(start_count(4, 1.0), 4);
    }
}
