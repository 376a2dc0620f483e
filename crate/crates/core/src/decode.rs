//! Greedy transducer decoding and token error rates.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::TransducerModel;
use crate::tensor::Tensor;

/// Output of [`greedy_decode`].
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, never blank.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of every chosen symbol, blanks included.
    pub score: f64,
    /// Non-blank symbols emitted at each frame.
    pub emits_per_frame: Vec<usize>,
}

/// Standard transducer greedy search. At each frame the most probable symbol
/// is taken; a token is emitted and the prediction network advanced while the
/// frame is kept, up to `emit_cap` tokens per frame, and blank moves to the
/// next frame.
pub fn greedy_decode(
    model: &TransducerModel,
    features: &Tensor,
    emit_cap: usize,
) -> Result<Hypothesis> {
    let enc = model.encode_projected(features)?;
    let blank = model.dims().blank();
    let mut state = model.predictor_start();
    let mut pred = model.project_pred(&state.output);
    let mut tokens = Vec::new();
    let mut emits_per_frame = Vec::with_capacity(enc.rows());
    let mut score = 0.0;
    let mut logp = vec![0.0; blank + 1];
    for t in 0..enc.rows() {
        let mut emitted = 0;
        loop {
            model.joint_log_probs(enc.row(t), &pred, &mut logp);
            let (best, best_lp) = argmax(&logp);
            if best == blank || emitted >= emit_cap {
                // a capped frame still has to consume its blank to advance
                score += logp[blank];
                break;
            }
            score += best_lp;
            tokens.push(best);
            emitted += 1;
            state = model.predictor_step(&state, best);
            pred = model.project_pred(&state.output);
        }
        emits_per_frame.push(emitted);
    }
    Ok(Hypothesis {
        tokens,
        score,
        emits_per_frame,
    })
}

fn argmax(v: &[f64]) -> (usize, f64) {
    // first maximum wins ties
    v.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
}

/// Counts of a minimal unit-cost alignment from reference to hypothesis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub distance: usize,
}

impl EditStats {
    /// Stats seen from the other side: insertions and deletions trade places.
    pub fn swapped(self) -> Self {
        EditStats {
            insertions: self.deletions,
            deletions: self.insertions,
            ..self
        }
    }
}

/// Levenshtein alignment of `hyp` against `reference`. Among minimal
/// alignments the one with the most substitutions is reported, which makes
/// the breakdown independent of argument order up to the I/D swap.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditStats {
    let (n, m) = (reference.len(), hyp.len());
    // cost[i][j] = (distance, -substitutions) ordered lexicographically
    let w = m + 1;
    let mut cost = vec![(0usize, 0isize); (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = (i, 0);
    }
    for j in 0..=m {
        cost[j] = (j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let (d, s) = cost[(i - 1) * w + j - 1];
            let diag = if reference[i - 1] == hyp[j - 1] {
                (d, s)
            } else {
                (d + 1, s - 1)
            };
            let (d, s) = cost[(i - 1) * w + j];
            let del = (d + 1, s);
            let (d, s) = cost[i * w + j - 1];
            let ins = (d + 1, s);
            cost[i * w + j] = diag.min(del).min(ins);
        }
    }
    let (distance, neg_subs) = cost[n * w + m];
    let substitutions = (-neg_subs) as usize;
    // distance = S + I + D and m - n = I - D fix the remaining counts
    let indels = (distance - substitutions) as isize;
    let insertions = ((indels + m as isize - n as isize) / 2) as usize;
    let indels = indels as usize;
    EditStats {
        substitutions,
        insertions,
        deletions: indels - insertions,
        distance,
    }
}

/// Token error rate with the denominator floored at one.
pub fn error_rate<T: PartialEq>(reference: &[T], hyp: &[T]) -> f64 {
    edit_distance(reference, hyp).distance as f64 / reference.len().max(1) as f64
}

/// Corpus-level error accumulator: total edits over total reference tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTally {
    pub edits: EditStats,
    pub reference_tokens: usize,
    pub utterances: usize,
}

impl ErrorTally {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hyp: &[T]) {
        let e = edit_distance(reference, hyp);
        self.edits.substitutions += e.substitutions;
        self.edits.insertions += e.insertions;
        self.edits.deletions += e.deletions;
        self.edits.distance += e.distance;
        self.reference_tokens += reference.len();
        self.utterances += 1;
    }

    pub fn rate(&self) -> f64 {
        self.edits.distance as f64 / self.reference_tokens.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_substitution() {
        let e = edit_distance(&['a', 'b', 'c'], &['a', 'x', 'c']);
        assert_eq!(
            e,
            EditStats {
                substitutions: 1,
                insertions: 0,
                deletions: 0,
                distance: 1
            }
        );
        assert!((error_rate(&['a', 'b', 'c'], &['a', 'x', 'c']) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_reference() {
        let e = edit_distance::<char>(&[], &['a']);
        assert_eq!((e.insertions, e.distance), (1, 1));
        assert_eq!(error_rate::<char>(&[], &['a']), 1.0);
    }

    #[test]
    fn identical_is_zero() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]).distance, 0);
    }

    #[test]
    fn mixed_edits() {
        let e = edit_distance(&[1, 2, 3, 4], &[1, 3, 4, 5, 6]);
        assert_eq!(e.distance, 3);
        assert_eq!(e.deletions, 1);
        assert_eq!(e.insertions, 2);
        let e = edit_distance(&[1, 2, 3, 4, 5], &[9]);
        assert_eq!((e.substitutions, e.deletions, e.insertions), (1, 4, 0));
    }

    #[test]
    fn argmax_takes_first_of_ties() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0]).0, 1);
    }
}
