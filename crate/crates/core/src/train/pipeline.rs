//! Seed training, pseudo-labeling rounds and the label-noise sweep.

use serde::{Deserialize, Serialize};

use super::{decode_all, init_model, thread_pool, Phase, TrainData, TrainOutcome, Trainer};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::data::{inject_label_noise, Corpus, NoiseKinds, Split, Utterance};
use crate::decode::ErrorTally;
use crate::error::{Error, Result};
use crate::model::TransducerModel;
use crate::rng;

/// Trains the seed model on the labeled split alone.
pub fn train_seed(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labeled = corpus.split(Split::Labeled);
    let dev = corpus.split(Split::Dev);
    let test = corpus.split(Split::Test);
    let model = init_model(&cfg.model, cfg.train.seed, Phase::seed())?;
    let data = TrainData {
        labeled: &labeled,
        pseudo: None,
        dev: &dev,
        test: Some(&test),
    };
    Trainer::new(
        model,
        data,
        &cfg.train,
        &cfg.train.seed_schedule,
        Phase::seed(),
        &cfg.hash(),
    )?
    .run()
}

pub struct PseudoLabels {
    /// Input utterances with `pseudo` set to the greedy hypothesis.
    pub utterances: Vec<Utterance>,
    /// Label quality against the references; absent for an empty input.
    pub report: Option<ErrorTally>,
}

pub fn pseudo_label(
    model: &TransducerModel,
    unlabeled: &[Utterance],
    cfg: &TrainConfig,
) -> Result<PseudoLabels> {
    let pool = thread_pool(cfg.workers)?;
    let hyps = decode_all(model, unlabeled, cfg.emit_cap, pool.as_ref())?;
    let mut tally = ErrorTally::default();
    let utterances = unlabeled
        .iter()
        .zip(hyps)
        .map(|(u, h)| {
            tally.add(&u.reference, &h);
            Utterance {
                pseudo: Some(h),
                ..u.clone()
            }
        })
        .collect();
    Ok(PseudoLabels {
        utterances,
        report: (!unlabeled.is_empty()).then_some(tally),
    })
}

/// Appends the labeled utterances, labeled with their references, to a
/// pseudo-labeled set.
pub fn combine_with_labeled(mut pseudo: Vec<Utterance>, labeled: &[Utterance]) -> Vec<Utterance> {
    pseudo.extend(labeled.iter().map(|u| Utterance {
        pseudo: Some(u.reference.clone()),
        ..u.clone()
    }));
    pseudo
}

/// Trains a freshly initialized student on labeled batches interleaved with
/// batches from `pseudo_set`.
pub fn train_student(
    corpus: &Corpus,
    pseudo_set: &[Utterance],
    cfg: &ExperimentConfig,
    iteration: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(u) = pseudo_set.iter().find(|u| u.pseudo.is_none()) {
        return Err(Error::MissingPseudo(u.id.clone()));
    }
    let labeled = corpus.split(Split::Labeled);
    let dev = corpus.split(Split::Dev);
    let test = corpus.split(Split::Test);
    let phase = Phase::student(iteration);
    let model = init_model(&cfg.model, cfg.train.seed, phase)?;
    let data = TrainData {
        labeled: &labeled,
        pseudo: Some(pseudo_set),
        dev: &dev,
        test: Some(&test),
    };
    Trainer::new(
        model,
        data,
        &cfg.train,
        &cfg.train.student_schedule,
        phase,
        &cfg.hash(),
    )?
    .run()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    /// 0 for the seed model.
    pub iteration: usize,
    pub dev_wer: f64,
    pub test_wer: Option<f64>,
    /// Error rate of the pseudo labels this model was trained on.
    pub pseudo_label_wer: Option<f64>,
}

pub struct IterationRun {
    pub seed: TrainOutcome,
    pub students: Vec<TrainOutcome>,
    pub table: Vec<IterationRow>,
}

/// Seed training followed by `cfg.iters` rounds of relabel-and-retrain.
pub fn iterate_pseudo_labeling(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<IterationRun> {
    let seed = train_seed(corpus, cfg)?;
    let mut table = vec![IterationRow {
        iteration: 0,
        dev_wer: seed.metrics.best_dev_wer,
        test_wer: seed.metrics.test_wer,
        pseudo_label_wer: None,
    }];
    let unlabeled = corpus.split(Split::Unlabeled);
    let labeled = corpus.split(Split::Labeled);
    let mut students: Vec<TrainOutcome> = Vec::new();
    for iteration in 1..=cfg.iters {
        let teacher = students.last().map_or(&seed.model, |s| &s.model);
        let labels = pseudo_label(teacher, &unlabeled, &cfg.train)?;
        let pl_wer = labels.report.map(|t| t.rate());
        log::info!("iteration {}: pseudo-label WER {:?}", iteration, pl_wer);
        let set = combine_with_labeled(labels.utterances, &labeled);
        let student = train_student(corpus, &set, cfg, iteration)?;
        table.push(IterationRow {
            iteration,
            dev_wer: student.metrics.best_dev_wer,
            test_wer: student.metrics.test_wer,
            pseudo_label_wer: pl_wer,
        });
        students.push(student);
    }
    Ok(IterationRun {
        seed,
        students,
        table,
    })
}

/// Unlabeled utterances whose pseudo labels are their references corrupted
/// at `rate`, plus the measured error rate of those labels.
pub fn noisy_pseudo_set(
    unlabeled: &[Utterance],
    rate: f64,
    kinds: NoiseKinds,
    vocab_size: usize,
    seed: u64,
) -> Result<(Vec<Utterance>, f64)> {
    let mut tally = ErrorTally::default();
    let mut out = Vec::with_capacity(unlabeled.len());
    for u in unlabeled {
        let mut r = rng::stream(seed, &["noise", &rate.to_string(), &u.id]);
        let noisy = inject_label_noise(&u.reference, rate, kinds, vocab_size, &mut r)?;
        tally.add(&u.reference, &noisy);
        out.push(Utterance {
            pseudo: Some(noisy),
            ..u.clone()
        });
    }
    Ok((out, tally.rate()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub noise_rate: f64,
    /// Measured error rate of the corrupted labels.
    pub label_wer: f64,
    /// Best dev WER with the gradient mask.
    pub gm: f64,
    /// Best dev WER of the same student without it.
    pub wo_gm: f64,
}

/// For each noise rate, trains the same student (same init and batch order)
/// with and without the gradient mask on artificially corrupted labels.
pub fn noise_sweep(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let unlabeled = corpus.split(Split::Unlabeled);
    let labeled = corpus.split(Split::Labeled);
    let mut rows = Vec::with_capacity(cfg.noise_rates.len());
    for &rate in &cfg.noise_rates {
        let (noisy, label_wer) = noisy_pseudo_set(
            &unlabeled,
            rate,
            cfg.noise_kinds,
            cfg.model.vocab_size,
            cfg.train.seed,
        )?;
        let set = combine_with_labeled(noisy, &labeled);
        let mut result = [0.0; 2];
        for (slot, grad_mask) in [true, false].into_iter().enumerate() {
            let mut run_cfg = cfg.clone();
            run_cfg.train.grad_mask = grad_mask;
            let out = train_student(corpus, &set, &run_cfg, 1)?;
            log::info!(
                "noise {} grad_mask {}: dev WER {:.4}",
                rate,
                grad_mask,
                out.metrics.best_dev_wer
            );
            result[slot] = out.metrics.best_dev_wer;
        }
        rows.push(SweepRow {
            noise_rate: rate,
            label_wer,
            gm: result[0],
            wo_gm: result[1],
        });
    }
    Ok(rows)
}
