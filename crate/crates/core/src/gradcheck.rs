//! Finite-difference checks of every analytic gradient.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::masking::sample_mask;
use crate::model::{ForwardMode, GatePolarity, ModelDims, TransducerModel};
use crate::rng::{self, Rng};
use crate::rnnt::{rnnt_loss, LogitLattice};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
/// Retry step for coordinates whose stencil straddles a relu kink.
pub const FINE_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        SuiteReport {
            suite: suite.to_string(),
            instances: 0,
            checked: 0,
            max_rel_err: 0.0,
            tolerance: TOLERANCE,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(relative_error(analytic, numeric));
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

/// Fourth-order central difference.
fn stencil<F: FnMut(f64) -> Result<f64>>(x: f64, h: f64, f: &mut F) -> Result<f64> {
    let near = f(x + h)? - f(x - h)?;
    let far = f(x + 2.0 * h)? - f(x - 2.0 * h)?;
    Ok((8.0 * near - far) / (12.0 * h))
}

/// Numeric derivative closest to `analytic` among [`STEP`] and
/// [`FINE_STEP`]. A wrong gradient disagrees at both; a relu kink inside the
/// wide stencil only spoils the first.
fn central<F: FnMut(f64) -> Result<f64>>(x: f64, analytic: f64, mut f: F) -> Result<f64> {
    let wide = stencil(x, STEP, &mut f)?;
    if relative_error(analytic, wide) < TOLERANCE {
        return Ok(wide);
    }
    let fine = stencil(x, FINE_STEP, &mut f)?;
    Ok(
        if relative_error(analytic, fine) < relative_error(analytic, wide) {
            fine
        } else {
            wide
        },
    )
}

fn normal_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        vocab_size: 3,
        feature_dim: 3,
        enc_layers: 2,
        enc_kernel: 3,
        enc_channels: 4,
        embed_dim: 3,
        pred_hidden: 4,
        joint_hidden: 5,
    }
}

/// Which forward pass a model check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelSuite {
    Supervised,
    PseudoMasked,
}

/// Checks every parameter scalar of freshly initialized tiny models.
/// Masked instances are compared against [`TransducerModel::frozen_masked_loss`].
pub fn check_model(suite: ModelSuite, instances: usize, seed: u64) -> Result<SuiteReport> {
    let name = match suite {
        ModelSuite::Supervised => "model/supervised",
        ModelSuite::PseudoMasked => "model/pseudo_masked",
    };
    let mut report = SuiteReport::new(name);
    let dims = tiny_dims();
    for i in 0..instances {
        let mut r = rng::stream(seed, &["gradcheck", name, &i.to_string()]);
        let mut model = TransducerModel::new(dims.clone(), &mut r)?;
        // Zero biases and the small mask embedding put relu inputs on or near
        // the kink, where finite differences are meaningless.
        for p in model
            .params_mut()
            .iter_mut()
            .filter(|p| p.name.ends_with("bias") || p.name == "mask_embedding")
        {
            for v in p.value.data_mut() {
                *v = r.gen_range(-1.0..1.0);
            }
        }
        let frames = r.gen_range(3..=6);
        let labels = r.gen_range(1..=3);
        let features = Tensor::new(
            vec![frames, dims.feature_dim],
            normal_vec(frames * dims.feature_dim, &mut r),
        )?;
        let targets: Vec<usize> = (0..labels)
            .map(|_| r.gen_range(0..dims.vocab_size))
            .collect();
        let plan = sample_mask(frames, 0.3, 2, &mut r)?;
        let mode = match suite {
            ModelSuite::Supervised => ForwardMode::Supervised,
            ModelSuite::PseudoMasked => ForwardMode::masked(plan.clone()),
        };
        let (_, grads) = model.loss_and_grads(&features, &targets, &mode)?;
        for (pi, g) in grads.0.iter().enumerate() {
            for (j, &analytic) in g.iter().enumerate() {
                let x0 = model.params()[pi].value.data()[j];
                let numeric = central(x0, analytic, |x| {
                    let mut m = model.clone();
                    m.params_mut()[pi].value.data_mut()[j] = x;
                    match suite {
                        ModelSuite::Supervised => m.loss(&features, &targets, &mode),
                        ModelSuite::PseudoMasked => m.frozen_masked_loss(
                            &model,
                            &features,
                            &targets,
                            &plan,
                            GatePolarity::default(),
                        ),
                    }
                })?;
                report.record(analytic, numeric);
            }
        }
        report.instances += 1;
    }
    Ok(report)
}

/// Transducer loss gradient with respect to raw (unnormalized) joint logits.
pub fn check_rnnt(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("rnnt");
    for i in 0..instances {
        let mut r = rng::stream(seed, &["gradcheck", "rnnt", &i.to_string()]);
        let frames = r.gen_range(1..=5);
        let labels = r.gen_range(0..=4);
        let classes = r.gen_range(2..=5);
        let targets: Vec<usize> = (0..labels).map(|_| r.gen_range(0..classes - 1)).collect();
        let logits: Vec<f64> = (0..frames * (labels + 1) * classes)
            .map(|_| r.gen_range(-3.0..3.0))
            .collect();
        let loss_of = |l: Vec<f64>| -> Result<f64> {
            Ok(rnnt_loss(
                &LogitLattice::from_logits(frames, labels + 1, classes, l)?,
                &targets,
            )?
            .loss)
        };
        let lattice = LogitLattice::from_logits(frames, labels + 1, classes, logits.clone())?;
        let analytic = rnnt_loss(&lattice, &targets)?.grad_raw_logits(&lattice);
        for (j, &a) in analytic.iter().enumerate() {
            let numeric = central(logits[j], a, |x| {
                let mut l = logits.clone();
                l[j] = x;
                loss_of(l)
            })?;
            report.record(a, numeric);
        }
        report.instances += 1;
    }
    Ok(report)
}

type OpCase = (&'static str, Vec<usize>, fn(&mut Graph, Var) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    fn c(g: &mut Graph, shape: &[usize], salt: f64) -> Var {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| ((i as f64 + 1.0) * (0.7 + salt)).sin())
            .collect();
        g.constant(Tensor::new(shape.to_vec(), data).expect("shape matches data"))
    }
    vec![
        ("matmul", vec![3, 4], |g, x| {
            let w = c(g, &[4, 2], 0.1);
            g.matmul(x, w)
        }),
        ("matmul_lhs", vec![4, 2], |g, x| {
            let a = c(g, &[3, 4], 0.2);
            g.matmul(a, x)
        }),
        ("add", vec![2, 3], |g, x| {
            let b = c(g, &[2, 3], 0.3);
            let y = g.add(x, b)?;
            g.mul_elementwise(y, x)
        }),
        ("add_row", vec![1, 3], |g, x| {
            let a = c(g, &[4, 3], 0.4);
            g.add_row(a, x)
        }),
        ("outer_add", vec![3, 2], |g, x| {
            let b = c(g, &[2, 2], 0.5);
            let y = g.outer_add(x, b)?;
            let z = g.outer_add(b, x)?;
            g.concat(y, z, 0)
        }),
        ("scale", vec![2, 2], |g, x| g.scale(x, -1.7)),
        ("tanh", vec![3, 3], |g, x| g.tanh(x)),
        ("relu", vec![3, 3], |g, x| g.relu(x)),
        ("log_softmax_rows", vec![3, 4], |g, x| g.log_softmax(x, 1)),
        ("log_softmax_cols", vec![3, 4], |g, x| g.log_softmax(x, 0)),
        ("embed_lookup", vec![4, 3], |g, x| {
            g.embed_lookup(x, &[2, 0, 2, 3])
        }),
        ("concat_cols", vec![3, 2], |g, x| {
            let b = c(g, &[3, 1], 0.6);
            g.concat(b, x, 1)
        }),
        ("slice_time", vec![5, 2], |g, x| g.slice_time(x, 1, 4)),
        ("unfold_time", vec![4, 3], |g, x| g.unfold_time(x, 3)),
        ("mask_rows", vec![1, 3], |g, x| {
            let a = c(g, &[4, 3], 0.7);
            let y = g.mask_rows(a, x, &[true, false, true, false])?;
            g.tanh(y)
        }),
    ]
}

/// Every differentiable graph operation, each reduced to a scalar through a
/// fixed random weighting.
pub fn check_ops(seed: u64) -> Result<Vec<SuiteReport>> {
    let mut reports = Vec::new();
    for (name, shape, build) in op_cases() {
        let mut report = SuiteReport::new(&format!("op/{}", name));
        let mut r = rng::stream(seed, &["gradcheck", "op", name]);
        let n: usize = shape.iter().product();
        // Keep relu inputs away from the kink.
        let x0: Vec<f64> = normal_vec(n, &mut r)
            .into_iter()
            .map(|v| if v.abs() < 0.1 { v + 0.2 } else { v })
            .collect();
        let weights_seed = r.gen::<u64>();
        let eval = |x: &[f64], grad: bool| -> Result<(f64, Vec<f64>)> {
            let mut g = Graph::new();
            let xv = g.param(Tensor::new(shape.clone(), x.to_vec())?);
            let y = build(&mut g, xv)?;
            let ys = g.value(y).shape().to_vec();
            let mut wr = rng::stream(weights_seed, &["weights"]);
            let w = g.constant(Tensor::new(
                ys.clone(),
                normal_vec(ys.iter().product(), &mut wr),
            )?);
            let z = g.mul_elementwise(y, w)?;
            let s = g.sum(z)?;
            let v = g.value(s).data()[0];
            if !grad {
                return Ok((v, Vec::new()));
            }
            g.backward(s)?;
            Ok((v, g.grad_or_zeros(xv)))
        };
        let (_, analytic) = eval(&x0, true)?;
        for j in 0..n {
            let numeric = central(x0[j], analytic[j], |v| {
                let mut x = x0.clone();
                x[j] = v;
                Ok(eval(&x, false)?.0)
            })?;
            report.record(analytic[j], numeric);
        }
        report.instances = 1;
        reports.push(report);
    }
    Ok(reports)
}

/// Every suite with the default instance counts.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let mut out = check_ops(seed)?;
    out.push(check_rnnt(instances, seed)?);
    out.push(check_model(ModelSuite::Supervised, instances, seed)?);
    out.push(check_model(ModelSuite::PseudoMasked, instances, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass() {
        for r in check_ops(1).unwrap() {
            assert!(r.passed(), "{:?}", r);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2e-9, 0.0) - 2e-5).abs() < 1e-18);
    }
}
