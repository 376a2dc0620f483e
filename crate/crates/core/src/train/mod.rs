//! Optimization loop shared by seed and student training.
//!
//! One [`Trainer`] owns a model, a single Adam state spanning every parameter
//! and two minibatch sources. Steps follow a fixed round-robin cycle derived
//! from the labeled:pseudo ratio. Pseudo steps run the gradient-masked
//! forward mode when enabled and the plain supervised mode otherwise.

mod adam;
mod pipeline;

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState, Schedule, StepOutcome};
pub use pipeline::{
    combine_with_labeled, iterate_pseudo_labeling, noise_sweep, noisy_pseudo_set, pseudo_label,
    train_seed, train_student, IterationRow, IterationRun, PseudoLabels, SweepRow,
};

use crate::config::{Ratio, TrainConfig};
use crate::data::Utterance;
use crate::decode::{greedy_decode, ErrorTally};
use crate::error::{Error, Result};
use crate::masking::sample_mask;
use crate::model::{ForwardMode, Gradients, TransducerModel};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchTag {
    Labeled,
    Pseudo,
}

impl BatchTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BatchTag::Labeled => "labeled",
            BatchTag::Pseudo => "pseudo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub tag: BatchTag,
    pub loss: f64,
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub dev_wer: f64,
}

/// Measurements of one training run. Wall-clock time is kept out of the
/// serialized form so repeated runs produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub phase: String,
    pub iteration: usize,
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_dev_wer: f64,
    pub test_wer: Option<f64>,
    pub rejected_steps: usize,
    pub stopped_early: bool,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunMetrics {
    /// `step,tag,loss` lines with a header.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,tag,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{}\n", s.step, s.tag.as_str(), s.loss));
        }
        out
    }
}

/// Which run of the pipeline is training; selects the named random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub name: &'static str,
    pub iteration: usize,
}

impl Phase {
    pub fn seed() -> Self {
        Phase {
            name: "seed",
            iteration: 0,
        }
    }

    pub fn student(iteration: usize) -> Self {
        Phase {
            name: "student",
            iteration,
        }
    }

    fn stream(&self, master: u64, what: &str) -> Rng {
        rng::stream(master, &[what, self.name, &self.iteration.to_string()])
    }
}

/// Fresh parameters for a phase, drawn from the run's `init` stream.
pub fn init_model(
    dims: &crate::model::ModelDims,
    seed: u64,
    phase: Phase,
) -> Result<TransducerModel> {
    TransducerModel::new(dims.clone(), &mut phase.stream(seed, "init"))
}

/// Round-robin schedule of batch types: all labeled batches of one cycle,
/// then all pseudo batches.
pub fn interleave(ratio: Option<Ratio>) -> Vec<BatchTag> {
    match ratio {
        None => vec![BatchTag::Labeled],
        Some(r) => std::iter::repeat_n(BatchTag::Labeled, r.labeled)
            .chain(std::iter::repeat_n(BatchTag::Pseudo, r.pseudo))
            .collect(),
    }
}

/// Per-utterance work item of one minibatch.
pub struct BatchItem<'a> {
    pub features: &'a Tensor,
    pub targets: &'a [usize],
    pub mode: ForwardMode,
}

/// Mean loss and mean gradient over a minibatch. Per-utterance gradients may
/// be computed on a thread pool but are always summed in batch order.
pub fn batch_gradients(
    model: &TransducerModel,
    items: &[BatchItem<'_>],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, Gradients)> {
    let one = |it: &BatchItem<'_>| model.loss_and_grads(it.features, it.targets, &it.mode);
    let parts: Vec<Result<(f64, Gradients)>> = match pool {
        Some(p) => p.install(|| items.par_iter().map(one).collect()),
        None => items.iter().map(one).collect(),
    };
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    let scale = 1.0 / items.len().max(1) as f64;
    total.scale(scale);
    Ok((loss * scale, total))
}

/// Corpus-level token error rate of greedy decoding against references.
pub fn evaluate(
    model: &TransducerModel,
    utterances: &[Utterance],
    emit_cap: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<ErrorTally> {
    let hyps = decode_all(model, utterances, emit_cap, pool)?;
    let mut tally = ErrorTally::default();
    for (u, h) in utterances.iter().zip(&hyps) {
        tally.add(&u.reference, h);
    }
    Ok(tally)
}

pub(crate) fn decode_all(
    model: &TransducerModel,
    utterances: &[Utterance],
    emit_cap: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<Vec<usize>>> {
    let one = |u: &Utterance| greedy_decode(model, &u.features, emit_cap).map(|h| h.tokens);
    match pool {
        Some(p) => p.install(|| utterances.par_iter().map(one).collect()),
        None => utterances.iter().map(one).collect(),
    }
}

pub(crate) fn thread_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start {} workers: {}", workers, e)))
}

struct Source {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Source {
    fn new(len: usize, mut rng: Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Source { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Training data of one run. Pseudo utterances are trained on their `pseudo`
/// labels; everything else on `reference`.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a [Utterance],
    pub pseudo: Option<&'a [Utterance]>,
    pub dev: &'a [Utterance],
    pub test: Option<&'a [Utterance]>,
}

pub struct TrainOutcome {
    /// Parameters at the best dev evaluation.
    pub model: TransducerModel,
    pub metrics: RunMetrics,
}

pub struct Trainer<'a> {
    model: TransducerModel,
    adam: AdamState,
    cfg: &'a TrainConfig,
    schedule: Schedule,
    data: TrainData<'a>,
    cycle: Vec<BatchTag>,
    labeled: Source,
    pseudo: Option<Source>,
    mask_rng: Rng,
    step: usize,
    pool: Option<rayon::ThreadPool>,
    metrics: RunMetrics,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: TransducerModel,
        data: TrainData<'a>,
        cfg: &'a TrainConfig,
        schedule: &Schedule,
        phase: Phase,
        config_hash: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::InvalidArgument("labeled set is empty".into()));
        }
        if let Some(p) = data.pseudo {
            if p.is_empty() {
                return Err(Error::InvalidArgument("pseudo-label set is empty".into()));
            }
            if let Some(u) = p.iter().find(|u| u.pseudo.is_none()) {
                return Err(Error::MissingPseudo(u.id.clone()));
            }
        }
        let adam = AdamState::new(model.params().iter().map(|p| p.value.numel()));
        Ok(Trainer {
            adam,
            cfg,
            schedule: schedule.clone(),
            cycle: interleave(data.pseudo.map(|_| cfg.ratio)),
            labeled: Source::new(
                data.labeled.len(),
                phase.stream(cfg.seed, "shuffle-labeled"),
            ),
            pseudo: data
                .pseudo
                .map(|p| Source::new(p.len(), phase.stream(cfg.seed, "shuffle-pseudo"))),
            mask_rng: phase.stream(cfg.seed, "mask"),
            step: 0,
            pool: thread_pool(cfg.workers)?,
            metrics: RunMetrics {
                phase: phase.name.to_string(),
                iteration: phase.iteration,
                config_hash: config_hash.to_string(),
                steps: Vec::new(),
                evals: Vec::new(),
                best_step: 0,
                best_dev_wer: f64::INFINITY,
                test_wer: None,
                rejected_steps: 0,
                stopped_early: false,
                wall_clock_secs: 0.0,
            },
            model,
            data,
        })
    }

    pub fn model(&self) -> &TransducerModel {
        &self.model
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Tag of the next step in the interleave cycle.
    pub fn next_tag(&self) -> BatchTag {
        self.cycle[self.step % self.cycle.len()]
    }

    /// Builds the next minibatch and its forward modes without training on it.
    fn next_items(&mut self) -> (BatchTag, Vec<BatchItem<'a>>) {
        let tag = self.next_tag();
        let size = self.cfg.batch_size;
        let items = match tag {
            BatchTag::Labeled => self
                .labeled
                .next_batch(size)
                .into_iter()
                .map(|i| {
                    let u = &self.data.labeled[i];
                    BatchItem {
                        features: &u.features,
                        targets: &u.reference,
                        mode: ForwardMode::Supervised,
                    }
                })
                .collect(),
            BatchTag::Pseudo => {
                let set = self.data.pseudo.expect("pseudo tag implies a pseudo set");
                let idx = self
                    .pseudo
                    .as_mut()
                    .expect("pseudo source")
                    .next_batch(size);
                idx.into_iter()
                    .map(|i| {
                        let u = &set[i];
                        let mode = if self.cfg.grad_mask {
                            let plan = sample_mask(
                                u.frames(),
                                self.cfg.mask_p,
                                self.cfg.mask_m,
                                &mut self.mask_rng,
                            )
                            .expect("validated mask parameters");
                            ForwardMode::PseudoMasked {
                                plan,
                                polarity: self.cfg.gate_polarity,
                            }
                        } else {
                            ForwardMode::Supervised
                        };
                        BatchItem {
                            features: &u.features,
                            targets: u.pseudo.as_deref().expect("checked in Trainer::new"),
                            mode,
                        }
                    })
                    .collect()
            }
        };
        (tag, items)
    }

    /// One optimizer update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let (tag, items) = self.next_items();
        let (loss, grads) =
            batch_gradients(&self.model, &items, self.pool.as_ref()).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    step,
                    detail: format!("non-finite value in {}", op),
                },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {}", loss),
            });
        }
        let lr = self.schedule.lr_at(step);
        let mut views: Vec<&mut [f64]> = self
            .model
            .params_mut()
            .iter_mut()
            .map(|p| p.value.data_mut())
            .collect();
        let outcome = adam_step(&mut views, &grads.0, &mut self.adam, &self.cfg.adam, lr);
        if outcome == StepOutcome::Rejected {
            self.metrics.rejected_steps += 1;
        }
        let rec = StepRecord {
            step,
            tag,
            loss,
            applied: outcome == StepOutcome::Applied,
        };
        self.metrics.steps.push(rec.clone());
        self.step += 1;
        Ok(rec)
    }

    /// Trains to the end of the schedule or until dev error stops improving,
    /// and returns the parameters from the best dev evaluation.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let started = Instant::now();
        let total = self.schedule.total_steps;
        let min_steps = self.schedule.warmup_steps + self.schedule.hold_steps;
        let mut best = self.model.clone();
        let mut since_best = 0;
        while self.step < total {
            self.step()?;
            if !self.step.is_multiple_of(self.cfg.eval_every) && self.step != total {
                continue;
            }
            let wer = evaluate(
                &self.model,
                self.data.dev,
                self.cfg.emit_cap,
                self.pool.as_ref(),
            )?
            .rate();
            log::info!(
                "{} iter {} step {}: dev WER {:.4}",
                self.metrics.phase,
                self.metrics.iteration,
                self.step,
                wer
            );
            self.metrics.evals.push(EvalRecord {
                step: self.step,
                dev_wer: wer,
            });
            if wer < self.metrics.best_dev_wer {
                self.metrics.best_dev_wer = wer;
                self.metrics.best_step = self.step;
                best = self.model.clone();
                since_best = 0;
            } else {
                since_best += 1;
            }
            if since_best >= self.cfg.patience && self.step >= min_steps {
                self.metrics.stopped_early = self.step < total;
                break;
            }
        }
        if let Some(test) = self.data.test {
            self.metrics.test_wer =
                Some(evaluate(&best, test, self.cfg.emit_cap, self.pool.as_ref())?.rate());
        }
        self.metrics.wall_clock_secs = started.elapsed().as_secs_f64();
        Ok(TrainOutcome {
            model: best,
            metrics: self.metrics,
        })
    }
}
