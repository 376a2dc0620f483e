//! Transducer lattice loss.
//!
//! The lattice has `T` frames and `U + 1` label positions. From node `(t, u)`
//! a path either emits blank and moves to `(t + 1, u)` or emits the next
//! target `y[u]` and moves to `(t, u + 1)`. Every path ends with the blank
//! emitted at `(T - 1, U)`, so it contains exactly `T` blanks and `U` emits.
//! The blank symbol is the last vocabulary index.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{log_add_exp, log_softmax_in_place, Tensor};

/// `T × (U+1) × (K+1)` log-probabilities; index `K` is blank.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitLattice {
    frames: usize,
    positions: usize,
    classes: usize,
    values: Vec<f64>,
}

impl LogitLattice {
    /// Wraps already-normalized log-probabilities laid out `[t][u][k]`.
    pub fn new(frames: usize, positions: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidArgument(
                "lattice needs at least one frame".into(),
            ));
        }
        if positions == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "lattice needs U+1 >= 1 and K+1 >= 2, got {} and {}",
                positions, classes
            )));
        }
        if values.len() != frames * positions * classes {
            return Err(Error::shape(
                "lattice",
                format!(
                    "{}x{}x{} lattice from {} values",
                    frames,
                    positions,
                    classes,
                    values.len()
                ),
            ));
        }
        Ok(LogitLattice {
            frames,
            positions,
            classes,
            values,
        })
    }

    /// Applies log-softmax over the class axis of raw joint-network logits.
    pub fn from_logits(
        frames: usize,
        positions: usize,
        classes: usize,
        mut logits: Vec<f64>,
    ) -> Result<Self> {
        if classes > 0 {
            logits.chunks_mut(classes).for_each(log_softmax_in_place);
        }
        Self::new(frames, positions, classes, logits)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `U + 1`.
    pub fn positions(&self) -> usize {
        self.positions
    }

    /// `K + 1`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> usize {
        self.classes - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, t: usize, u: usize, k: usize) -> f64 {
        self.values[(t * self.positions + u) * self.classes + k]
    }

    /// Largest `|logsumexp - 0|` across all `(t, u)` slices.
    pub fn normalization_error(&self) -> f64 {
        self.values
            .chunks(self.classes)
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()).abs()
            })
            .fold(0.0, f64::max)
    }

    fn check_targets(&self, targets: &[usize]) -> Result<()> {
        if targets.len() + 1 != self.positions {
            return Err(Error::shape(
                "rnnt_loss",
                format!(
                    "{} targets for a lattice with {} positions",
                    targets.len(),
                    self.positions
                ),
            ));
        }
        let vocab = self.classes - 1;
        match targets.iter().find(|&&y| y >= vocab) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }
}

/// Loss, forward/backward variables and gradient of one lattice.
#[derive(Clone, Debug)]
pub struct LatticeResult {
    /// `-ln P(Y|X)`.
    pub loss: f64,
    /// `ln` forward variables, `T × (U+1)`.
    pub alpha: Vec<f64>,
    /// `ln` backward variables, `T × (U+1)`; `beta[0]` equals `ln P(Y|X)`.
    pub beta: Vec<f64>,
    /// `∂loss / ∂values`, same layout as the lattice.
    pub grad_logits: Vec<f64>,
}

impl LatticeResult {
    /// Converts `grad_logits` (w.r.t. normalized log-probs) into the gradient
    /// w.r.t. the raw logits the lattice was normalized from.
    pub fn grad_raw_logits(&self, lattice: &LogitLattice) -> Vec<f64> {
        let k1 = lattice.classes;
        let mut out = self.grad_logits.clone();
        for (g, lp) in out.chunks_mut(k1).zip(lattice.values.chunks(k1)) {
            let s: f64 = g.iter().sum();
            g.iter_mut().zip(lp).for_each(|(g, lp)| *g -= lp.exp() * s);
        }
        out
    }

    /// For every frame `t`, each path crosses exactly one blank transition
    /// leaving column `t`, so the log-sum of those transitions' occupancy must
    /// reproduce `ln P(Y|X)`. Returns the worst deviation over all frames.
    pub fn occupancy_error(&self, lattice: &LogitLattice) -> f64 {
        let (t_len, u1) = (lattice.frames, lattice.positions);
        let blank = lattice.blank();
        let log_p = -self.loss;
        let mut worst: f64 = 0.0;
        for t in 0..t_len {
            let mut total = f64::NEG_INFINITY;
            for u in 0..u1 {
                let next = if t + 1 < t_len {
                    self.beta[(t + 1) * u1 + u]
                } else if u + 1 == u1 {
                    0.0
                } else {
                    continue;
                };
                total = log_add_exp(
                    total,
                    self.alpha[t * u1 + u] + lattice.at(t, u, blank) + next,
                );
            }
            worst = worst.max((total - log_p).abs());
        }
        worst
    }
}

/// `-ln P(Y|X)` by log-domain forward-backward, with its exact gradient.
pub fn rnnt_loss(lattice: &LogitLattice, targets: &[usize]) -> Result<LatticeResult> {
    lattice.check_targets(targets)?;
    let (t_len, u1) = (lattice.frames, lattice.positions);
    let blank = lattice.blank();
    let idx = |t: usize, u: usize| t * u1 + u;

    let mut alpha = vec![f64::NEG_INFINITY; t_len * u1];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha[idx(t - 1, u)] + lattice.at(t - 1, u, blank)
            } else {
                f64::NEG_INFINITY
            };
            let from_emit = if u > 0 {
                alpha[idx(t, u - 1)] + lattice.at(t, u - 1, targets[u - 1])
            } else {
                f64::NEG_INFINITY
            };
            alpha[idx(t, u)] = log_add_exp(from_blank, from_emit);
        }
    }

    let mut beta = vec![f64::NEG_INFINITY; t_len * u1];
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            let via_blank = if t + 1 < t_len {
                beta[idx(t + 1, u)] + lattice.at(t, u, blank)
            } else if u + 1 == u1 {
                lattice.at(t, u, blank)
            } else {
                f64::NEG_INFINITY
            };
            let via_emit = if u + 1 < u1 {
                beta[idx(t, u + 1)] + lattice.at(t, u, targets[u])
            } else {
                f64::NEG_INFINITY
            };
            beta[idx(t, u)] = log_add_exp(via_blank, via_emit);
        }
    }

    let log_p = beta[0];
    if !log_p.is_finite() {
        return Err(Error::NonFinite { op: "rnnt_loss" });
    }

    // d(-ln P)/d lp(t,u,k) = -(occupancy of that transition) / P
    let mut grad = vec![0.0; lattice.values.len()];
    for t in 0..t_len {
        for u in 0..u1 {
            let a = alpha[idx(t, u)];
            let base = idx(t, u) * lattice.classes;
            let next_blank = if t + 1 < t_len {
                beta[idx(t + 1, u)]
            } else if u + 1 == u1 {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            grad[base + blank] = -(a + lattice.at(t, u, blank) + next_blank - log_p).exp();
            if u + 1 < u1 {
                let y = targets[u];
                grad[base + y] = -(a + lattice.at(t, u, y) + beta[idx(t, u + 1)] - log_p).exp();
            }
        }
    }

    Ok(LatticeResult {
        loss: -log_p,
        alpha,
        beta,
        grad_logits: grad,
    })
}

/// Largest `T + U` accepted by [`rnnt_loss_bruteforce`].
pub const BRUTEFORCE_LIMIT: usize = 12;

/// Reference loss by explicit enumeration of every alignment, summed in the
/// linear domain with compensated summation. Returns the loss and the number
/// of paths visited.
pub fn rnnt_loss_bruteforce(lattice: &LogitLattice, targets: &[usize]) -> Result<(f64, u64)> {
    lattice.check_targets(targets)?;
    let (t_len, u_len) = (lattice.frames, targets.len());
    if t_len + u_len > BRUTEFORCE_LIMIT {
        return Err(Error::TooLarge(t_len + u_len));
    }
    let blank = lattice.blank();
    // Each path is T-1 non-final blanks interleaved with U emits, then the
    // final blank. Enumerate placements of the emits as bit patterns.
    let steps = t_len - 1 + u_len;
    let mut sum = 0.0;
    let mut comp = 0.0;
    let mut count = 0u64;
    for pattern in 0u32..(1u32 << steps) {
        if pattern.count_ones() as usize != u_len {
            continue;
        }
        let (mut t, mut u) = (0, 0);
        let mut prob = 1.0;
        for s in 0..steps {
            if pattern >> s & 1 == 1 {
                prob *= lattice.at(t, u, targets[u]).exp();
                u += 1;
            } else {
                prob *= lattice.at(t, u, blank).exp();
                t += 1;
            }
        }
        prob *= lattice.at(t, u, blank).exp();
        // Neumaier summation
        let next = sum + prob;
        if sum.abs() >= prob.abs() {
            comp += (sum - next) + prob;
        } else {
            comp += (prob - next) + sum;
        }
        sum = next;
        count += 1;
    }
    Ok((-(sum + comp).ln(), count))
}

/// Graph handles of the joint network's parameters.
#[derive(Clone, Copy, Debug)]
pub struct JointVars {
    /// `D × H`
    pub enc_w: Var,
    /// `1 × H`
    pub enc_b: Var,
    /// `D' × H`
    pub pred_w: Var,
    /// `H × (K+1)`
    pub out_w: Var,
    /// `1 × (K+1)`
    pub out_b: Var,
}

/// Joint network over every `(t, u)` pair:
/// `log_softmax(tanh(h_enc[t] W_e + b_e + h_pred[u] W_p) W_o + b_o)`.
/// The result is a `(T·(U+1)) × (K+1)` node laid out like [`LogitLattice`].
pub fn lattice_from_model(
    g: &mut Graph,
    h_enc: Var,
    h_pred: Var,
    joint: &JointVars,
) -> Result<Var> {
    let e = g.matmul(h_enc, joint.enc_w)?;
    let e = g.add_row(e, joint.enc_b)?;
    let p = g.matmul(h_pred, joint.pred_w)?;
    let z = g.outer_add(e, p)?;
    let z = g.tanh(z)?;
    let logits = g.matmul(z, joint.out_w)?;
    let logits = g.add_row(logits, joint.out_b)?;
    g.log_softmax(logits, 1)
}

/// Snapshot of a lattice node as a [`LogitLattice`].
pub fn lattice_value(g: &Graph, lattice: Var, frames: usize) -> Result<LogitLattice> {
    let v: &Tensor = g.value(lattice);
    let classes = v.cols();
    let positions = v.rows() / frames.max(1);
    LogitLattice::new(frames, positions, classes, v.data().to_vec())
}

/// Records the transducer loss of a lattice node on the graph.
pub fn rnnt_loss_node(
    g: &mut Graph,
    lattice: Var,
    frames: usize,
    targets: &[usize],
) -> Result<(Var, LatticeResult)> {
    let lat = lattice_value(g, lattice, frames)?;
    let res = rnnt_loss(&lat, targets)?;
    let node = g.external_scalar(lattice, res.loss, res.grad_logits.clone())?;
    Ok((node, res))
}
