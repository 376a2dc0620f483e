//! Adam with bias correction and a warmup / hold / linear-decay schedule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        AdamState { m, v, step: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient held a non-finite value; nothing was changed.
    Rejected,
}

pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> StepOutcome {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(
        params.len(),
        state.m.len(),
        "one moment buffer per parameter"
    );
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        log::warn!(
            "rejected optimizer step {}: non-finite gradient",
            state.step + 1
        );
        return StepOutcome::Rejected;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    StepOutcome::Applied
}

/// Linear warmup to `peak_lr`, constant hold, then linear decay reaching zero
/// at `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub hold_steps: usize,
    pub total_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            peak_lr: 2e-3,
            warmup_steps: 500,
            hold_steps: 2000,
            total_steps: 8000,
        }
    }
}

impl Schedule {
    /// Rate used for the 0-based update `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step + 1;
        if s <= self.warmup_steps {
            return self.peak_lr * s as f64 / self.warmup_steps as f64;
        }
        let decay_start = self.warmup_steps + self.hold_steps;
        if s <= decay_start {
            return self.peak_lr;
        }
        let span = self.total_steps.saturating_sub(decay_start).max(1);
        let left = self.total_steps.saturating_sub(s);
        self.peak_lr * left as f64 / span as f64
    }

    pub fn validate(&self, name: &str) -> crate::Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(crate::Error::Config(format!(
                "{}.peak_lr must be positive",
                name
            )));
        }
        if self.total_steps == 0 {
            return Err(crate::Error::Config(format!(
                "{}.total_steps must be positive",
                name
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut fresh = AdamState::new([2]);
        adam_step(
            &mut [&mut p],
            &[vec![0.0, 0.0]],
            &mut fresh,
            &AdamConfig::default(),
            0.1,
        );
        assert_eq!(p, vec![1.0, -2.0]);

        let mut st = AdamState::new([2]);
        st.m[0] = vec![0.5, 0.5];
        st.v[0] = vec![0.25, 0.25];
        adam_step(
            &mut [&mut p],
            &[vec![0.0, 0.0]],
            &mut st,
            &AdamConfig::default(),
            0.1,
        );
        assert!((st.m[0][0] - 0.45).abs() < 1e-15);
        assert!((st.v[0][0] - 0.24975).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_unit_direction() {
        let mut p = vec![0.0];
        let mut st = AdamState::new([1]);
        adam_step(
            &mut [&mut p],
            &[vec![1.0]],
            &mut st,
            &AdamConfig::default(),
            0.1,
        );
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![1.0];
        let mut st = AdamState::new([1]);
        let out = adam_step(
            &mut [&mut p],
            &[vec![f64::NAN]],
            &mut st,
            &AdamConfig::default(),
            0.1,
        );
        assert_eq!(out, StepOutcome::Rejected);
        assert_eq!((p[0], st.step, st.m[0][0]), (1.0, 0, 0.0));
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x, y) = x² + 10 y²
        let mut p = vec![3.0, -2.0];
        let mut st = AdamState::new([2]);
        let cfg = AdamConfig::default();
        let mut reached = None;
        for step in 0..2000 {
            let g = vec![2.0 * p[0], 20.0 * p[1]];
            let lr = 0.05 * (1.0 - step as f64 / 2000.0);
            adam_step(&mut [&mut p], &[g], &mut st, &cfg, lr);
            if (p[0] * p[0] + p[1] * p[1]).sqrt() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "ended at {:?}", p);
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            peak_lr: 1.0,
            warmup_steps: 10,
            hold_steps: 5,
            total_steps: 25,
        };
        assert!((s.lr_at(0) - 0.1).abs() < 1e-15);
        assert_eq!(s.lr_at(9), 1.0);
        assert_eq!(s.lr_at(14), 1.0);
        assert!((s.lr_at(19) - 0.5).abs() < 1e-15);
        assert_eq!(s.lr_at(24), 0.0);
        assert_eq!(s.lr_at(100), 0.0);
    }
}
