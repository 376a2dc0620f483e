//! Synthetic speech-like corpora.
//!
//! Token sequences come from a sparse first-order Markov chain, so a masked
//! stretch of frames is partly predictable from its neighbours. Each token `k`
//! lasts a random number of frames drawn from `N(μ_k, σ²I)`, and short
//! silences drawn from `N(0, σ²I)` separate consecutive tokens.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Inclusive `[min, max]` frames per token.
    pub frames_per_token: [usize; 2],
    /// Inclusive `[min, max]` silence frames between consecutive tokens.
    pub silence_frames: [usize; 2],
    pub feature_noise: f64,
    /// Norm of every token mean vector.
    pub mean_scale: f64,
    /// Inclusive `[min, max]` tokens per utterance.
    pub tokens_per_utterance: [usize; 2],
    /// Preferred successors of each token in the Markov chain.
    pub successors: usize,
    /// Probability mass spread uniformly over all tokens at every transition.
    pub transition_smoothing: f64,
    pub labeled: usize,
    pub unlabeled: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            vocab_size: 16,
            feature_dim: 8,
            frames_per_token: [2, 4],
            silence_frames: [0, 2],
            feature_noise: 0.3,
            mean_scale: 1.0,
            tokens_per_utterance: [4, 12],
            successors: 3,
            transition_smoothing: 0.1,
            labeled: 200,
            unlabeled: 1800,
            dev: 100,
            test: 100,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("corpus: {}", msg)));
        if self.vocab_size == 0 || self.feature_dim == 0 {
            return bad("vocab_size and feature_dim must be positive");
        }
        for (name, [lo, hi]) in [
            ("frames_per_token", self.frames_per_token),
            ("silence_frames", self.silence_frames),
            ("tokens_per_utterance", self.tokens_per_utterance),
        ] {
            if lo > hi {
                return bad(&format!("{} range [{}, {}] is empty", name, lo, hi));
            }
        }
        if self.frames_per_token[0] == 0 {
            return bad("every token needs at least one frame");
        }
        if self.tokens_per_utterance[1] == 0 {
            return bad("utterances need at least one token");
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be a non-negative number");
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return bad("mean_scale must be positive");
        }
        if !(0.0..=1.0).contains(&self.transition_smoothing) {
            return bad("transition_smoothing must be within [0, 1]");
        }
        if self.successors == 0 || self.successors > self.vocab_size {
            return bad("successors must be within [1, vocab_size]");
        }
        if [self.labeled, self.unlabeled, self.dev, self.test].contains(&0) {
            return bad("every split needs at least one utterance");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Labeled, Split::Unlabeled, Split::Dev, Split::Test];

    fn prefix(self) -> &'static str {
        match self {
            Split::Labeled => "L",
            Split::Unlabeled => "U",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    /// `T × F`
    pub features: Tensor,
    pub reference: Vec<usize>,
    pub pseudo: Option<Vec<usize>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Utterances of one split, in corpus order.
    pub fn split(&self, split: Split) -> Vec<Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.split == split)
            .cloned()
            .collect()
    }
}

/// Deterministic token means, each of norm `mean_scale`.
pub fn token_means(spec: &CorpusSpec) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(spec.seed, &["data", "means"]);
    (0..spec.vocab_size)
        .map(|_| {
            let v: Vec<f64> = (0..spec.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x * spec.mean_scale / norm).collect()
        })
        .collect()
}

/// Row-stochastic `K × K` transition matrix of the token chain.
pub fn transition_matrix(spec: &CorpusSpec) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(spec.seed, &["data", "chain"]);
    let k = spec.vocab_size;
    let floor = spec.transition_smoothing / k as f64;
    let preferred = (1.0 - spec.transition_smoothing) / spec.successors as f64;
    (0..k)
        .map(|_| {
            let mut row = vec![floor; k];
            for s in rand::seq::index::sample(&mut rng, k, spec.successors) {
                row[s] += preferred;
            }
            row
        })
        .collect()
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let mut r: f64 = rng.gen();
    for (i, p) in probs.iter().enumerate() {
        if r < *p {
            return i;
        }
        r -= p;
    }
    probs.len() - 1
}

fn generate_utterance(
    spec: &CorpusSpec,
    means: &[Vec<f64>],
    chain: &[Vec<f64>],
    id: String,
    split: Split,
) -> Utterance {
    let mut rng = rng::stream(spec.seed, &["data", "utt", &id]);
    let n = rng.gen_range(spec.tokens_per_utterance[0].max(1)..=spec.tokens_per_utterance[1]);
    let mut tokens = Vec::with_capacity(n);
    tokens.push(rng.gen_range(0..spec.vocab_size));
    while tokens.len() < n {
        let prev = *tokens.last().expect("non-empty");
        tokens.push(draw_categorical(&chain[prev], &mut rng));
    }
    let f = spec.feature_dim;
    let sigma = spec.feature_noise;
    let mut data = Vec::new();
    let mut frame = |center: Option<&[f64]>, rng: &mut rng::Rng| {
        for j in 0..f {
            let mu = center.map_or(0.0, |c| c[j]);
            let z: f64 = StandardNormal.sample(rng);
            data.push(mu + sigma * z);
        }
    };
    for (i, &tok) in tokens.iter().enumerate() {
        if i > 0 {
            let gap = rng.gen_range(spec.silence_frames[0]..=spec.silence_frames[1]);
            (0..gap).for_each(|_| frame(None, &mut rng));
        }
        let dur = rng.gen_range(spec.frames_per_token[0]..=spec.frames_per_token[1]);
        (0..dur).for_each(|_| frame(Some(&means[tok]), &mut rng));
    }
    let frames = data.len() / f;
    Utterance {
        id,
        split,
        features: Tensor::matrix(frames, f, data).expect("whole frames"),
        reference: tokens,
        pseudo: None,
    }
}

/// Generates all four splits. Every utterance is a pure function of the `CorpusSpec`
/// seed and its id.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let means = token_means(spec);
    let chain = transition_matrix(spec);
    let sizes = [spec.labeled, spec.unlabeled, spec.dev, spec.test];
    let mut utterances = Vec::with_capacity(sizes.iter().sum());
    for (split, n) in Split::ALL.into_iter().zip(sizes) {
        for i in 0..n {
            let id = format!("{}-{:05}", split.prefix(), i);
            utterances.push(generate_utterance(spec, &means, &chain, id, split));
        }
    }
    Ok(Corpus { utterances })
}

/// Which edits [`inject_label_noise`] may apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKinds {
    /// Substitution, deletion and insertion, equally likely.
    #[default]
    Mixed,
    SubstitutionsOnly,
}

/// Corrupts a label sequence: each position independently, with probability
/// `rate`, gets one edit. Substitutions pick a uniformly random different
/// token; insertions put a uniformly random token before the position.
pub fn inject_label_noise<R: Rng + ?Sized>(
    tokens: &[usize],
    rate: f64,
    kinds: NoiseKinds,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "noise rate must be within [0, 1], got {}",
            rate
        )));
    }
    if rate > 0.0 && vocab_size < 2 {
        return Err(Error::InvalidArgument(
            "label noise needs at least two tokens".into(),
        ));
    }
    let mut out = Vec::with_capacity(tokens.len() + tokens.len() / 4);
    for &tok in tokens {
        if rate == 0.0 || rng.gen::<f64>() >= rate {
            out.push(tok);
            continue;
        }
        let edit = match kinds {
            NoiseKinds::Mixed => rng.gen_range(0..3),
            NoiseKinds::SubstitutionsOnly => 0,
        };
        match edit {
            0 => {
                let r = rng.gen_range(0..vocab_size - 1);
                out.push(if r >= tok { r + 1 } else { r });
            }
            1 => {}
            _ => {
                out.push(rng.gen_range(0..vocab_size));
                out.push(tok);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    split: Split,
    features: Vec<Vec<f64>>,
    reference: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo: Option<Vec<usize>>,
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Writes one JSON object per line; `.gz` paths are gzip-compressed.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut out: Box<dyn Write> = if is_gzip(path) {
        Box::new(GzEncoder::new(file, Compression::default()))
    } else {
        Box::new(file)
    };
    for u in &corpus.utterances {
        let rec = Record {
            id: u.id.clone(),
            split: u.split,
            features: (0..u.frames())
                .map(|t| u.features.row(t).to_vec())
                .collect(),
            reference: u.reference.clone(),
            pseudo: u.pseudo.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus`], checking every token against
/// `vocab_size` and every feature row against the first row's width.
pub fn read_corpus(path: &Path, vocab_size: usize) -> Result<Corpus> {
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if is_gzip(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let err = |line: usize, msg: String| Error::Corpus {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut utterances = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(line_no, e.to_string()))?;
        let cols = rec.features.first().map_or(0, Vec::len);
        if rec.features.is_empty() || cols == 0 {
            return Err(err(
                line_no,
                format!("utterance {} has no feature frames", rec.id),
            ));
        }
        if let Some(t) = rec.features.iter().position(|r| r.len() != cols) {
            return Err(err(
                line_no,
                format!(
                    "utterance {}: feature row {} has {} values, expected {}",
                    rec.id,
                    t,
                    rec.features[t].len(),
                    cols
                ),
            ));
        }
        let labels = rec.reference.iter().chain(rec.pseudo.iter().flatten());
        if let Some(tok) = labels.copied().find(|&t| t >= vocab_size) {
            return Err(err(
                line_no,
                format!(
                    "utterance {}: token {} is outside the vocabulary of {}",
                    rec.id, tok, vocab_size
                ),
            ));
        }
        let frames = rec.features.len();
        let data = rec.features.into_iter().flatten().collect();
        utterances.push(Utterance {
            id: rec.id,
            split: rec.split,
            features: Tensor::matrix(frames, cols, data)?,
            reference: rec.reference,
            pseudo: rec.pseudo,
        });
    }
    Ok(Corpus { utterances })
}
