//! `gradmask` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use gradmask::checkpoint::{load_checkpoint, to_bytes};
use gradmask::config::{ExperimentConfig, Ratio};
use gradmask::data::{generate_corpus, read_corpus, write_corpus, Corpus, Split};
use gradmask::train::{self, RunMetrics, TrainOutcome};
use gradmask::{gradcheck, ErrorClass};

#[derive(Parser, Debug)]
#[command(
    name = "gradmask",
    version,
    about = "Gradient-masked pseudo-label training for a small RNN-Transducer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train the seed model on the labeled split.
    TrainSeed,
    /// Decode the unlabeled split with a checkpoint and attach pseudo labels.
    PseudoLabel,
    /// Train a student on a pseudo-labeled corpus.
    TrainStudent,
    /// Seed training followed by pseudo-labeling rounds.
    Iterate,
    /// Dev and test error rates of a checkpoint.
    Eval,
    /// Finite-difference checks of every gradient.
    Gradcheck,
    /// Students with and without the gradient mask on corrupted labels.
    NoiseSweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainSeed => "train-seed",
            Command::PseudoLabel => "pseudo-label",
            Command::TrainStudent => "train-student",
            Command::Iterate => "iterate",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::NoiseSweep => "noise-sweep",
        }
    }
}

#[derive(clap::Args, Debug, Clone, Serialize)]
struct Opts {
    /// JSON config document, or a manifest written by an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed; the corpus seed comes from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Corpus file (.jsonl or .jsonl.gz). Generated from the config when absent.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Train pseudo-label batches without the gradient mask.
    #[arg(long, global = true)]
    no_grad_mask: bool,
    #[arg(long, global = true)]
    mask_p: Option<f64>,
    #[arg(long, global = true)]
    mask_m: Option<usize>,
    /// Labeled:pseudo minibatch ratio, e.g. 1:9.
    #[arg(long, global = true)]
    ratio: Option<String>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Comma-separated label-noise rates.
    #[arg(long, global = true, value_delimiter = ',')]
    noise_rates: Option<Vec<f64>>,
    /// Worker threads inside each step. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    config_hash: String,
    seed: u64,
    corpus: Option<&'a Path>,
    checkpoint: Option<&'a Path>,
    out: &'a Path,
    build: String,
    started: String,
    finished: Option<String>,
}

/// Files written by this invocation, removed again if it fails.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> anyhow::Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            created_dir,
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        if !self.written.contains(&p) {
            self.written.push(p.clone());
        }
        p
    }

    /// Writes through a temporary file and a rename.
    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.path(name);
        let tmp = self.dir.join(format!(".{}.tmp", name));
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn discard(self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_dir {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn load_config(opts: &Opts) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        None => ExperimentConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let mut doc: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            if doc.get("command").is_some_and(Value::is_string) {
                doc = doc["config"].take();
            }
            serde_json::from_value(doc)
                .map_err(|e| gradmask::Error::Config(format!("{}: {}", path.display(), e)))?
        }
    };
    let t = &mut cfg.train;
    if let Some(s) = opts.seed {
        t.seed = s;
    }
    if opts.no_grad_mask {
        t.grad_mask = false;
    }
    if let Some(p) = opts.mask_p {
        t.mask_p = p;
    }
    if let Some(m) = opts.mask_m {
        t.mask_m = m;
    }
    if let Some(r) = &opts.ratio {
        t.ratio = r.parse::<Ratio>()?;
    }
    if let Some(w) = opts.workers {
        t.workers = w;
    }
    if let Some(n) = opts.iters {
        cfg.iters = n;
    }
    if let Some(r) = &opts.noise_rates {
        cfg.noise_rates = r.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(opts: &Opts, cfg: &ExperimentConfig) -> anyhow::Result<Corpus> {
    Ok(match &opts.corpus {
        Some(p) => read_corpus(p, cfg.corpus.vocab_size)?,
        None => generate_corpus(&cfg.corpus)?,
    })
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    path.as_deref().ok_or_else(|| {
        anyhow!(gradmask::Error::InvalidArgument(format!(
            "--{} is required",
            flag
        )))
    })
}

fn summary_of(m: &RunMetrics) -> Value {
    let mut v = serde_json::to_value(m).expect("metrics serialize");
    v.as_object_mut().expect("object").remove("steps");
    v
}

fn write_run(out: &mut Outputs, prefix: &str, outcome: &TrainOutcome) -> anyhow::Result<()> {
    let hash = &outcome.metrics.config_hash;
    out.write(
        &format!("{}.ckpt", prefix),
        &to_bytes(&outcome.model, hash)?,
    )?;
    out.write(
        &format!("{}.steps.csv", prefix),
        outcome.metrics.steps_csv().as_bytes(),
    )?;
    out.write_json(
        &format!("{}.summary.json", prefix),
        &summary_of(&outcome.metrics),
    )?;
    println!(
        "{}: best dev WER {:.4} at step {}, test WER {}",
        prefix,
        outcome.metrics.best_dev_wer,
        outcome.metrics.best_step,
        outcome
            .metrics
            .test_wer
            .map_or("-".into(), |w| format!("{:.4}", w))
    );
    Ok(())
}

fn run(cmd: Command, opts: &Opts, cfg: &ExperimentConfig, out: &mut Outputs) -> anyhow::Result<()> {
    let hash = cfg.hash();
    match cmd {
        Command::GenData => {
            let corpus = generate_corpus(&cfg.corpus)?;
            let path = out.path("corpus.jsonl");
            write_corpus(&path, &corpus)?;
            println!("wrote {} utterances to {}", corpus.len(), path.display());
        }
        Command::TrainSeed => {
            let corpus = load_corpus(opts, cfg)?;
            write_run(out, "seed", &train::train_seed(&corpus, cfg)?)?;
        }
        Command::PseudoLabel => {
            let (model, _) = load_checkpoint(require(&opts.checkpoint, "checkpoint")?)?;
            let corpus = load_corpus(opts, cfg)?;
            let labels = train::pseudo_label(&model, &corpus.split(Split::Unlabeled), &cfg.train)?;
            let mut pseudo = labels.utterances.into_iter();
            let utterances = corpus
                .utterances
                .iter()
                .map(|u| match u.split {
                    Split::Unlabeled => pseudo
                        .next()
                        .expect("one hypothesis per unlabeled utterance"),
                    Split::Labeled => {
                        train::combine_with_labeled(Vec::new(), std::slice::from_ref(u)).remove(0)
                    }
                    _ => u.clone(),
                })
                .collect();
            let path = out.path("pseudo.jsonl");
            write_corpus(&path, &Corpus { utterances })?;
            let wer = labels.report.map(|t| t.rate());
            out.write_json(
                "pseudo.summary.json",
                &json!({ "config_hash": hash, "pseudo_label_wer": wer }),
            )?;
            println!(
                "pseudo-label WER {}",
                wer.map_or("-".into(), |w| format!("{:.4}", w))
            );
        }
        Command::TrainStudent => {
            let corpus = load_corpus(opts, cfg)?;
            let set: Vec<_> = corpus
                .utterances
                .iter()
                .filter(|u| matches!(u.split, Split::Unlabeled | Split::Labeled))
                .cloned()
                .collect();
            write_run(
                out,
                "student",
                &train::train_student(&corpus, &set, cfg, 1)?,
            )?;
        }
        Command::Iterate => {
            let corpus = load_corpus(opts, cfg)?;
            let run = train::iterate_pseudo_labeling(&corpus, cfg)?;
            write_run(out, "seed", &run.seed)?;
            for (i, s) in run.students.iter().enumerate() {
                write_run(out, &format!("iter-{}", i + 1), s)?;
            }
            let mut csv = String::from("iteration,dev_wer,test_wer,pseudo_label_wer\n");
            for r in &run.table {
                let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    r.iteration,
                    r.dev_wer,
                    opt(r.test_wer),
                    opt(r.pseudo_label_wer)
                ));
            }
            out.write("iterations.csv", csv.as_bytes())?;
            out.write_json(
                "summary.json",
                &json!({ "config_hash": hash, "iterations": run.table }),
            )?;
            print!("{}", csv);
        }
        Command::Eval => {
            let (model, meta) = load_checkpoint(require(&opts.checkpoint, "checkpoint")?)?;
            let corpus = load_corpus(opts, cfg)?;
            let mut report = serde_json::Map::new();
            report.insert("checkpoint_config_hash".into(), json!(meta.config_hash));
            for (split, name) in [(Split::Dev, "dev"), (Split::Test, "test")] {
                let tally =
                    train::evaluate(&model, &corpus.split(split), cfg.train.emit_cap, None)?;
                println!(
                    "{} WER {:.4} ({} utterances)",
                    name,
                    tally.rate(),
                    tally.utterances
                );
                report.insert(name.into(), json!({ "wer": tally.rate(), "tally": tally }));
            }
            out.write_json("eval.json", &report)?;
        }
        Command::Gradcheck => {
            let reports = gradcheck::run_all(20, cfg.train.seed)?;
            for r in &reports {
                println!(
                    "{:<24} {:>6} checks  max rel err {:.3e}  {}",
                    r.suite,
                    r.checked,
                    r.max_rel_err,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            out.write_json("gradcheck.json", &reports)?;
            if let Some(bad) = reports.iter().find(|r| !r.passed()) {
                bail!(gradmask::Error::GradcheckFailed {
                    suite: bad.suite.clone(),
                    max_rel_err: bad.max_rel_err,
                });
            }
        }
        Command::NoiseSweep => {
            let corpus = load_corpus(opts, cfg)?;
            let rows = train::noise_sweep(&corpus, cfg)?;
            let mut csv = String::from("noise_rate,gm,wo_gm\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.noise_rate, r.gm, r.wo_gm));
            }
            out.write("noise_sweep.csv", csv.as_bytes())?;
            out.write_json(
                "summary.json",
                &json!({ "config_hash": hash, "rows": rows }),
            )?;
            print!("{}", csv);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<gradmask::Error>().map(|e| e.class()) {
        Some(ErrorClass::Numerical) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cfg = match load_config(&cli.opts) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {:#}", e);
            return ExitCode::from(exit_code(&e));
        }
    };
    let mut out = match Outputs::new(&cli.opts.out) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {:#}", e);
            return ExitCode::from(2);
        }
    };
    let mut manifest = Manifest {
        command: cli.command.name(),
        config: &cfg,
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        corpus: cli.opts.corpus.as_deref(),
        checkpoint: cli.opts.checkpoint.as_deref(),
        out: &cli.opts.out,
        build: option_env!("GRADMASK_BUILD_ID")
            .map(str::to_string)
            .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION"))),
        started: chrono::Utc::now().to_rfc3339(),
        finished: None,
    };
    let result = out
        .write_json("manifest.json", &manifest)
        .and_then(|_| run(cli.command, &cli.opts, &cfg, &mut out))
        .and_then(|_| {
            manifest.finished = Some(chrono::Utc::now().to_rfc3339());
            out.write_json("manifest.json", &manifest)
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            out.discard();
            ExitCode::from(exit_code(&e))
        }
    }
}
