//! The miniature transducer: temporal-convolution encoder, single-layer
//! recurrent prediction network, additive joint network and a learnt mask
//! embedding, plus the wiring that turns a pseudo-label forward pass into a
//! gradient-masked one.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::MaskPlan;
use crate::rnnt::{lattice_from_model, rnnt_loss_node, JointVars, LatticeResult};
use crate::tensor::{gemm, log_softmax_in_place, Tensor};

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Output tokens, excluding blank.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub enc_layers: usize,
    /// Odd temporal window of every encoder layer.
    pub enc_kernel: usize,
    pub enc_channels: usize,
    pub embed_dim: usize,
    pub pred_hidden: usize,
    pub joint_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            vocab_size: 16,
            feature_dim: 8,
            enc_layers: 3,
            enc_kernel: 5,
            enc_channels: 48,
            embed_dim: 16,
            pred_hidden: 48,
            joint_hidden: 64,
        }
    }
}

impl ModelDims {
    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    /// `K + 1`
    pub fn classes(&self) -> usize {
        self.vocab_size + 1
    }

    /// Frames of context visible on each side of an encoder output.
    pub fn receptive_half_width(&self) -> usize {
        self.enc_layers * (self.enc_kernel / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("enc_layers", self.enc_layers),
            ("enc_channels", self.enc_channels),
            ("embed_dim", self.embed_dim),
            ("pred_hidden", self.pred_hidden),
            ("joint_hidden", self.joint_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{} must be positive", name)));
        }
        if self.enc_kernel % 2 == 0 {
            return Err(Error::Config("model.enc_kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    TokenEmbedding,
    Predictor,
    Joint,
    MaskEmbedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Index layout of the fixed parameter census.
#[derive(Clone, Copy, Debug)]
struct Layout {
    layers: usize,
}

impl Layout {
    fn enc_w(self, i: usize) -> usize {
        2 * i
    }
    fn enc_b(self, i: usize) -> usize {
        2 * i + 1
    }
    fn base(self) -> usize {
        2 * self.layers
    }
    fn embed(self) -> usize {
        self.base()
    }
    fn pred_in(self) -> usize {
        self.base() + 1
    }
    fn pred_rec(self) -> usize {
        self.base() + 2
    }
    fn pred_b(self) -> usize {
        self.base() + 3
    }
    fn joint(self) -> [usize; 5] {
        let b = self.base();
        [b + 4, b + 5, b + 6, b + 7, b + 8]
    }
    fn mask_emb(self) -> usize {
        self.base() + 9
    }
    fn count(self) -> usize {
        self.base() + 10
    }
}

/// Which frames keep encoder gradient on a gradient-masked batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePolarity {
    /// Gradient survives only at masked frames (`grad ← mask ⊙ grad`).
    #[default]
    KeepMasked,
    /// Gradient survives only at unmasked frames (`grad ← ¬mask ⊙ grad`).
    KeepUnmasked,
}

impl GatePolarity {
    pub fn keep(self, plan: &MaskPlan) -> Vec<bool> {
        match self {
            GatePolarity::KeepMasked => plan.mask().to_vec(),
            GatePolarity::KeepUnmasked => plan.mask().iter().map(|m| !m).collect(),
        }
    }
}

/// How a forward pass treats its batch.
#[derive(Clone, Debug, PartialEq)]
pub enum ForwardMode {
    /// Plain transducer training.
    Supervised,
    /// Input spans replaced by the mask embedding, encoder gradient gated per
    /// frame, prediction network behind a stop-gradient.
    PseudoMasked {
        plan: MaskPlan,
        polarity: GatePolarity,
    },
}

impl ForwardMode {
    pub fn masked(plan: MaskPlan) -> Self {
        ForwardMode::PseudoMasked {
            plan,
            polarity: GatePolarity::default(),
        }
    }
}

/// Per-parameter gradient buffers aligned with [`TransducerModel::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(model: &TransducerModel) -> Self {
        Gradients(
            model
                .params
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }

    /// `Σ |g|` over the parameters of one group.
    pub fn group_abs_sum(&self, model: &TransducerModel, group: ParamGroup) -> f64 {
        (0..self.0.len())
            .filter(|&i| model.group_of(i) == group)
            .map(|i| self.0[i].iter().map(|g| g.abs()).sum::<f64>())
            .sum()
    }
}

/// A recorded forward pass with handles to the interesting nodes.
pub struct ModelGraph {
    pub graph: Graph,
    pub params: Vec<Var>,
    /// Encoder output before any gradient gate.
    pub h_enc: Var,
    /// Prediction-network output before any stop-gradient.
    pub h_pred: Var,
    /// `(T·(U+1)) × (K+1)` log-probabilities.
    pub lattice: Var,
    pub loss: Var,
    pub result: LatticeResult,
}

impl ModelGraph {
    pub fn backward(&mut self) -> Result<()> {
        self.graph.backward(self.loss)
    }

    pub fn gradients(&self) -> Gradients {
        Gradients(
            self.params
                .iter()
                .map(|&v| self.graph.grad_or_zeros(v))
                .collect(),
        )
    }
}

/// Prediction-network state after consuming some label history.
#[derive(Clone, Debug, PartialEq)]
pub struct PredState {
    pub output: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransducerModel {
    dims: ModelDims,
    params: Vec<Param>,
}

impl TransducerModel {
    /// Fresh model: fan-in scaled uniform weights, zero biases, token table
    /// uniform in `[-1, 1]`, mask embedding from `N(0, 0.1²)`.
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut params = Vec::new();
        let uniform = |name: String, rows: usize, cols: usize, fan_in: usize, rng: &mut R| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Param {
                name,
                value: Tensor::matrix(rows, cols, data).expect("consistent shape"),
            }
        };
        let zeros = |name: &str, cols: usize| Param {
            name: name.to_string(),
            value: Tensor::zeros(&[1, cols]),
        };
        let (k, d) = (dims.enc_kernel, dims.enc_channels);
        for i in 0..dims.enc_layers {
            let c_in = if i == 0 { dims.feature_dim } else { d };
            params.push(uniform(
                format!("encoder.{}.weight", i),
                k * c_in,
                d,
                k * c_in,
                rng,
            ));
            params.push(zeros(&format!("encoder.{}.bias", i), d));
        }
        params.push(uniform(
            "predictor.embedding".into(),
            dims.classes(),
            dims.embed_dim,
            1,
            rng,
        ));
        params.push(uniform(
            "predictor.input_weight".into(),
            dims.embed_dim,
            dims.pred_hidden,
            dims.embed_dim,
            rng,
        ));
        params.push(uniform(
            "predictor.recurrent_weight".into(),
            dims.pred_hidden,
            dims.pred_hidden,
            dims.pred_hidden,
            rng,
        ));
        params.push(zeros("predictor.bias", dims.pred_hidden));
        let h = dims.joint_hidden;
        params.push(uniform("joint.encoder_weight".into(), d, h, d, rng));
        params.push(zeros("joint.encoder_bias", h));
        params.push(uniform(
            "joint.predictor_weight".into(),
            dims.pred_hidden,
            h,
            dims.pred_hidden,
            rng,
        ));
        params.push(uniform(
            "joint.output_weight".into(),
            h,
            dims.classes(),
            h,
            rng,
        ));
        params.push(zeros("joint.output_bias", dims.classes()));
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let emb = (0..dims.feature_dim).map(|_| normal.sample(rng)).collect();
        params.push(Param {
            name: "mask_embedding".into(),
            value: Tensor::matrix(1, dims.feature_dim, emb)?,
        });
        Ok(TransducerModel { dims, params })
    }

    /// Rebuilds a model from a named parameter list, checking the census.
    pub fn from_params(dims: ModelDims, params: Vec<Param>) -> Result<Self> {
        dims.validate()?;
        let mut rng = crate::rng::stream(0, &["census"]);
        let template = TransducerModel::new(dims.clone(), &mut rng)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(&params) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        Ok(TransducerModel { dims, params })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn layout(&self) -> Layout {
        Layout {
            layers: self.dims.enc_layers,
        }
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        let l = self.layout();
        match index {
            i if i < l.base() => ParamGroup::Encoder,
            i if i == l.embed() => ParamGroup::TokenEmbedding,
            i if i <= l.pred_b() => ParamGroup::Predictor,
            i if i == l.mask_emb() => ParamGroup::MaskEmbedding,
            _ => ParamGroup::Joint,
        }
    }

    // ---- training graph ------------------------------------------------------

    fn check_inputs(&self, features: &Tensor, targets: &[usize]) -> Result<(usize, usize)> {
        let (t, f) = features.expect_matrix("forward")?;
        if f != self.dims.feature_dim {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} feature columns for a model with feature_dim {}",
                    f, self.dims.feature_dim
                ),
            ));
        }
        if t == 0 {
            return Err(Error::InvalidArgument("utterance has no frames".into()));
        }
        if let Some(&token) = targets.iter().find(|&&y| y >= self.dims.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.dims.vocab_size,
            });
        }
        Ok((t, f))
    }

    fn encoder(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        let l = self.layout();
        let mut h = input;
        for i in 0..self.dims.enc_layers {
            let u = g.unfold_time(h, self.dims.enc_kernel)?;
            let z = g.matmul(u, params[l.enc_w(i)])?;
            let z = g.add_row(z, params[l.enc_b(i)])?;
            let z = g.relu(z)?;
            h = if i == 0 { z } else { g.add(h, z)? };
        }
        Ok(h)
    }

    fn predictor(&self, g: &mut Graph, params: &[Var], targets: &[usize]) -> Result<Var> {
        let l = self.layout();
        let mut history = Vec::with_capacity(targets.len() + 1);
        history.push(self.dims.blank());
        history.extend_from_slice(targets);
        let e = g.embed_lookup(params[l.embed()], &history)?;
        let x = g.matmul(e, params[l.pred_in()])?;
        let x = g.add_row(x, params[l.pred_b()])?;
        let mut out: Option<Var> = None;
        let mut prev: Option<Var> = None;
        for u in 0..history.len() {
            let xu = g.slice_time(x, u, u + 1)?;
            let pre = match prev {
                Some(h) => {
                    let r = g.matmul(h, params[l.pred_rec()])?;
                    g.add(xu, r)?
                }
                None => xu,
            };
            let h = g.tanh(pre)?;
            out = Some(match out {
                Some(o) => g.concat(o, h, 0)?,
                None => h,
            });
            prev = Some(h);
        }
        Ok(out.expect("history is never empty"))
    }

    fn joint_vars(&self, params: &[Var]) -> JointVars {
        let [enc_w, enc_b, pred_w, out_w, out_b] = self.layout().joint().map(|i| params[i]);
        JointVars {
            enc_w,
            enc_b,
            pred_w,
            out_w,
            out_b,
        }
    }

    /// Records the forward pass and transducer loss of one utterance.
    pub fn forward(
        &self,
        features: &Tensor,
        targets: &[usize],
        mode: &ForwardMode,
    ) -> Result<ModelGraph> {
        let (frames, _) = self.check_inputs(features, targets)?;
        let mut g = Graph::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.param(p.value.clone()))
            .collect();
        let x = g.constant(features.clone());
        let (h_enc, h_pred, enc_in, pred_in) = match mode {
            ForwardMode::Supervised => {
                let h_enc = self.encoder(&mut g, &params, x)?;
                let h_pred = self.predictor(&mut g, &params, targets)?;
                (h_enc, h_pred, h_enc, h_pred)
            }
            ForwardMode::PseudoMasked { plan, polarity } => {
                if plan.len() != frames {
                    return Err(Error::shape(
                        "forward",
                        format!("mask plan of {} frames for {} frames", plan.len(), frames),
                    ));
                }
                let masked = g.mask_rows(x, params[self.layout().mask_emb()], plan.mask())?;
                let h_enc = self.encoder(&mut g, &params, masked)?;
                let gated = g.gradient_gate(h_enc, &polarity.keep(plan))?;
                let h_pred = self.predictor(&mut g, &params, targets)?;
                let stopped = g.stop_gradient(h_pred);
                (h_enc, h_pred, gated, stopped)
            }
        };
        let joint = self.joint_vars(&params);
        let lattice = lattice_from_model(&mut g, enc_in, pred_in, &joint)?;
        let (loss, result) = rnnt_loss_node(&mut g, lattice, frames, targets)?;
        Ok(ModelGraph {
            graph: g,
            params,
            h_enc,
            h_pred,
            lattice,
            loss,
            result,
        })
    }

    /// Loss and parameter gradients of one utterance.
    pub fn loss_and_grads(
        &self,
        features: &Tensor,
        targets: &[usize],
        mode: &ForwardMode,
    ) -> Result<(f64, Gradients)> {
        let mut mg = self.forward(features, targets, mode)?;
        mg.backward()?;
        Ok((mg.result.loss, mg.gradients()))
    }

    /// Pseudo-batch loss of `self` with every gradient-blocked quantity held at
    /// `anchor`'s value: encoder rows outside the keep set and the whole
    /// prediction-network output. At `self == anchor` its plain derivative is
    /// what the gated forward pass reports, which makes it the reference for
    /// finite-difference checks of [`ForwardMode::PseudoMasked`].
    pub fn frozen_masked_loss(
        &self,
        anchor: &TransducerModel,
        features: &Tensor,
        targets: &[usize],
        plan: &MaskPlan,
        polarity: GatePolarity,
    ) -> Result<f64> {
        let mode = ForwardMode::PseudoMasked {
            plan: plan.clone(),
            polarity,
        };
        let live = self.forward(features, targets, &mode)?;
        let frozen = anchor.forward(features, targets, &mode)?;
        let keep = polarity.keep(plan);
        let mut enc = frozen.graph.value(frozen.h_enc).clone();
        let cols = enc.cols();
        let live_enc = live.graph.value(live.h_enc);
        for (t, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            enc.data_mut()[t * cols..(t + 1) * cols].copy_from_slice(live_enc.row(t));
        }
        let mut g = Graph::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.param(p.value.clone()))
            .collect();
        let h_enc = g.constant(enc);
        let h_pred = g.constant(frozen.graph.value(frozen.h_pred).clone());
        let lattice = lattice_from_model(&mut g, h_enc, h_pred, &self.joint_vars(&params))?;
        Ok(rnnt_loss_node(&mut g, lattice, features.rows(), targets)?
            .1
            .loss)
    }

    /// Loss only, without recording gradients.
    pub fn loss(&self, features: &Tensor, targets: &[usize], mode: &ForwardMode) -> Result<f64> {
        Ok(self.forward(features, targets, mode)?.result.loss)
    }

    // ---- inference -----------------------------------------------------------

    /// Encoder output passed through the joint network's encoder projection
    /// and bias, `T × H`.
    pub fn encode_projected(&self, features: &Tensor) -> Result<Tensor> {
        self.check_inputs(features, &[])?;
        let mut g = Graph::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect();
        let x = g.constant(features.clone());
        let h = self.encoder(&mut g, &params, x)?;
        let joint = self.joint_vars(&params);
        let e = g.matmul(h, joint.enc_w)?;
        let e = g.add_row(e, joint.enc_b)?;
        Ok(g.value(e).clone())
    }

    fn rnn_step(&self, hidden: Option<&[f64]>, token: usize) -> PredState {
        let l = self.layout();
        let dh = self.dims.pred_hidden;
        let emb = self.params[l.embed()].value.row(token);
        let mut pre = self.params[l.pred_b()].value.data().to_vec();
        gemm(
            1,
            self.dims.embed_dim,
            dh,
            emb,
            false,
            self.params[l.pred_in()].value.data(),
            false,
            1.0,
            &mut pre,
        );
        if let Some(h) = hidden {
            gemm(
                1,
                dh,
                dh,
                h,
                false,
                self.params[l.pred_rec()].value.data(),
                false,
                1.0,
                &mut pre,
            );
        }
        PredState {
            output: pre.iter().map(|v| v.tanh()).collect(),
        }
    }

    /// State after the start-of-sequence symbol.
    pub fn predictor_start(&self) -> PredState {
        self.rnn_step(None, self.dims.blank())
    }

    pub fn predictor_step(&self, state: &PredState, token: usize) -> PredState {
        self.rnn_step(Some(&state.output), token)
    }

    /// Prediction output through the joint network's predictor projection.
    pub fn project_pred(&self, output: &[f64]) -> Vec<f64> {
        let h = self.dims.joint_hidden;
        let w = &self.params[self.layout().joint()[2]].value;
        let mut out = vec![0.0; h];
        gemm(
            1,
            self.dims.pred_hidden,
            h,
            output,
            false,
            w.data(),
            false,
            0.0,
            &mut out,
        );
        out
    }

    /// Log-probabilities over `K + 1` symbols for one `(t, u)` pair.
    pub fn joint_log_probs(&self, enc_proj: &[f64], pred_proj: &[f64], out: &mut [f64]) {
        let [_, _, _, out_w, out_b] = self.layout().joint();
        let z: Vec<f64> = enc_proj
            .iter()
            .zip(pred_proj)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        out.copy_from_slice(self.params[out_b].value.data());
        gemm(
            1,
            z.len(),
            out.len(),
            &z,
            false,
            self.params[out_w].value.data(),
            false,
            1.0,
            out,
        );
        log_softmax_in_place(out);
    }

    /// Total number of parameter tensors.
    pub fn census_len(dims: &ModelDims) -> usize {
        Layout {
            layers: dims.enc_layers,
        }
        .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny() -> ModelDims {
        ModelDims {
            vocab_size: 3,
            feature_dim: 2,
            enc_layers: 2,
            enc_kernel: 3,
            enc_channels: 4,
            embed_dim: 3,
            pred_hidden: 4,
            joint_hidden: 5,
        }
    }

    fn features(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, &["x"]);
        Tensor::matrix(t, f, (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn census_is_fixed() {
        let m = TransducerModel::new(ModelDims::default(), &mut stream(0, &["init"])).unwrap();
        assert_eq!(m.params().len(), TransducerModel::census_len(m.dims()));
        assert_eq!(m.params().last().unwrap().name, "mask_embedding");
        assert!(m.dims().receptive_half_width() >= 6);
        assert_eq!(m.group_of(0), ParamGroup::Encoder);
        assert_eq!(m.group_of(6), ParamGroup::TokenEmbedding);
        assert_eq!(m.group_of(7), ParamGroup::Predictor);
        assert_eq!(m.group_of(9), ParamGroup::Predictor);
        assert_eq!(m.group_of(10), ParamGroup::Joint);
        assert_eq!(m.group_of(15), ParamGroup::MaskEmbedding);
    }

    #[test]
    fn input_mask_rows() {
        let m = TransducerModel::new(tiny(), &mut stream(1, &["init"])).unwrap();
        let x = features(3, 2, 2);
        let emb = m.param("mask_embedding").unwrap().clone();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ev = g.param(emb.clone());
        let none = g.mask_rows(xv, ev, &[false; 3]).unwrap();
        assert_eq!(g.value(none), &x);
        let all = g.mask_rows(xv, ev, &[true; 3]).unwrap();
        for t in 0..3 {
            assert_eq!(g.value(all).row(t), emb.data());
        }
        let mid = g.mask_rows(xv, ev, &[false, true, false]).unwrap();
        assert_eq!(g.value(mid).row(0), x.row(0));
        assert_eq!(g.value(mid).row(1), emb.data());
        assert_eq!(g.value(mid).row(2), x.row(2));
    }

    #[test]
    fn plan_length_mismatch() {
        let m = TransducerModel::new(tiny(), &mut stream(1, &["init"])).unwrap();
        let mode = ForwardMode::masked(MaskPlan::from_flags(vec![true; 3]));
        assert!(m.forward(&features(4, 2, 0), &[0], &mode).is_err());
    }

    #[test]
    fn supervised_and_fully_masked_losses_differ() {
        let m = TransducerModel::new(tiny(), &mut stream(1, &["init"])).unwrap();
        let x = features(3, 2, 5);
        let sup = m.loss(&x, &[1, 2], &ForwardMode::Supervised).unwrap();
        let masked = m
            .loss(
                &x,
                &[1, 2],
                &ForwardMode::masked(MaskPlan::from_flags(vec![true; 3])),
            )
            .unwrap();
        assert!((sup - masked).abs() > 1e-6);
    }

    #[test]
    fn inference_matches_training_graph() {
        let m = TransducerModel::new(tiny(), &mut stream(3, &["init"])).unwrap();
        let x = features(4, 2, 7);
        let targets = [2, 0];
        let mg = m.forward(&x, &targets, &ForwardMode::Supervised).unwrap();
        let lattice = mg.graph.value(mg.lattice);
        let enc = m.encode_projected(&x).unwrap();
        let mut state = m.predictor_start();
        let mut out = vec![0.0; 4];
        for u in 0..=targets.len() {
            let pred = m.project_pred(&state.output);
            for t in 0..4 {
                m.joint_log_probs(enc.row(t), &pred, &mut out);
                let row = lattice.row(t * 3 + u);
                for k in 0..4 {
                    assert!((row[k] - out[k]).abs() < 1e-12);
                }
            }
            if u < targets.len() {
                state = m.predictor_step(&state, targets[u]);
            }
        }
    }
}
