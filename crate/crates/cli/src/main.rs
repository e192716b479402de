//! `modroute`: corpus generation, both training phases, decoding,
//! evaluation, covariate analysis and gradient self-checks.
//!
//! All artifacts of a run live in one directory (`--out`):
//! `data/{train,val,test}.jsonl`, `phase1.ckpt`/`phase1.log`,
//! `phase2-<routing>.ckpt`/`.log`, `eval-<routing>-<split>.tsv` and
//! `analysis-<routing>-<split>.tsv`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use modroute::synthdata::{generate, read_split, split, write_corpus, BrainSample, Vocabulary};
use modroute::training::{
    self, covariate_analysis, evaluate, Checkpoint, Config, EvalReport, Routing, Trainer, LOG_HEADER,
};
use modroute::Error;

#[derive(Parser)]
#[command(name = "modroute", version, about = "Brain-to-text decoding with modality routing")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Seeds both the corpus and the model.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted override such as `optim.lr=1e-4`; repeatable, last one wins.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Training {
    /// Continue from this phase's checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Also checkpoint every N steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    save_every: u64,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the synthetic corpus.
    GenData(Common),
    /// Alignment phase: projectors, decoder and prompt.
    TrainPhase1 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
    },
    /// Routing phase, starting from the phase-1 checkpoint.
    TrainPhase2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        /// soft_merge, hard_select, similarity_merge, or single_<i>.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Print generated text for some samples.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Sample ids, comma separated; defaults to the first five.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<usize>,
    },
    /// Write the metrics report for a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Correlate text-projector weights with the sentence covariate.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Rolling-mean window.
        #[arg(long, default_value_t = 15)]
        window: usize,
    },
    /// Finite-difference check of every primitive and both objectives.
    Gradcheck {
        /// Random inputs per primitive.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

/// Exit 1: the invocation cannot work as given. Exit 2: it failed while
/// running.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    training::configure_threads();
    match dispatch(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(verb: Verb) -> Outcome {
    match verb {
        Verb::GenData(c) => gen_data(&c),
        Verb::TrainPhase1 { common, training } => train_phase1(&common, &training),
        Verb::TrainPhase2 {
            common,
            training,
            strategy,
        } => train_phase2(&common, &training, strategy.as_deref()),
        Verb::Decode {
            common,
            strategy,
            split,
            ids,
        } => decode(&common, strategy.as_deref(), &split, &ids),
        Verb::Eval { common, strategy, split } => eval(&common, strategy.as_deref(), &split),
        Verb::Analyze {
            common,
            strategy,
            split,
            window,
        } => analyze(&common, strategy.as_deref(), &split, window),
        Verb::Gradcheck { seeds } => gradcheck(seeds),
    }
}

/// Loads the config with `--seed` applied before the explicit overrides,
/// and echoes the result.
fn load_config(c: &Common) -> Outcome<Config> {
    if !c.config.is_file() {
        return Err(usage(format!("config file {} does not exist", c.config.display())));
    }
    let mut overrides = Vec::new();
    if let Some(seed) = c.seed {
        overrides.push(format!("corpus.seed={seed}"));
        overrides.push(format!("model.seed={seed}"));
    }
    overrides.extend(c.overrides.iter().cloned());
    let config = Config::load(&c.config, &overrides)?;
    eprintln!("# effective configuration\n{}", config.to_toml());
    Ok(config)
}

fn data_path(c: &Common, split: &str) -> PathBuf {
    c.out.join("data").join(format!("{split}.jsonl"))
}

fn load_split(c: &Common, config: &Config, name: &str) -> Outcome<Vec<BrainSample>> {
    if !matches!(name, "train" | "val" | "test") {
        return Err(usage(format!("unknown split `{name}`; expected train, val or test")));
    }
    let path = data_path(c, name);
    if !path.is_file() {
        return Err(usage(format!("{} is missing; run gen-data first", path.display())));
    }
    let (header, samples) = read_split(&path)?;
    if header.spec_hash != config.corpus.hash() {
        return Err(usage(format!(
            "{} was generated from a different corpus spec; rerun gen-data",
            path.display()
        )));
    }
    Ok(samples)
}

fn routing_of(flag: Option<&str>, config: &Config) -> Outcome<Routing> {
    match flag {
        Some(s) => Routing::parse(s).map_err(|e| usage(e.to_string())),
        None => Ok(Routing::Router(config.router.strategy)),
    }
}

fn phase1_ckpt(c: &Common) -> PathBuf {
    c.out.join("phase1.ckpt")
}

fn phase2_ckpt(c: &Common, routing: Routing) -> PathBuf {
    c.out.join(format!("phase2-{}.ckpt", routing.label()))
}

fn load_checkpoint(path: &Path, what: &str) -> Outcome<Checkpoint<f64>> {
    if !path.is_file() {
        return Err(usage(format!("{} not found; run {what} first", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn gen_data(c: &Common) -> Outcome {
    let config = load_config(c)?;
    let corpus = generate(&config.corpus)?;
    let dir = c.out.join("data");
    write_corpus(&dir, &corpus)?;
    let s = split(&corpus)?;
    println!(
        "wrote {} ({} train, {} val, {} test; spec {})",
        dir.display(),
        s.train.len(),
        s.val.len(),
        s.test.len(),
        config.corpus.hash()
    );
    Ok(())
}

fn open_log(path: &Path, append: bool) -> Outcome<BufWriter<File>> {
    let file = if append {
        OpenOptions::new().append(true).create(true).open(path)
    } else {
        File::create(path)
    }
    .with_context(|| format!("opening {}", path.display()))?;
    let mut w = BufWriter::new(file);
    if !append {
        writeln!(w, "{LOG_HEADER}").context("writing log header")?;
    }
    Ok(w)
}

/// Runs to the end of the phase, checkpointing every `save_every` steps and
/// at the end.
fn drive(
    mut trainer: Trainer<f64>,
    train: &[BrainSample],
    ckpt: &Path,
    log_path: &Path,
    training: &Training,
    resumed: bool,
) -> Outcome {
    let mut log = open_log(log_path, resumed)?;
    let total = trainer.total_steps();
    while trainer.step_index() < total {
        let until = match training.save_every {
            0 => total,
            k => ((trainer.step_index() / k + 1) * k).min(total),
        };
        let stats = trainer.run_until(train, until, &mut log)?;
        log.flush().context("flushing training log")?;
        Checkpoint::from_trainer(&trainer).save(ckpt)?;
        if let Some(s) = stats.last() {
            eprintln!("step {}/{}: total {:.5}", s.step + 1, total, s.total);
        }
    }
    Checkpoint::from_trainer(&trainer).save(ckpt)?;
    println!("wrote {} and {}", ckpt.display(), log_path.display());
    Ok(())
}

fn train_phase1(c: &Common, training: &Training) -> Outcome {
    let config = load_config(c)?;
    let train = load_split(c, &config, "train")?;
    let ckpt = phase1_ckpt(c);
    let resumed = training.resume && ckpt.is_file();
    let trainer = if resumed {
        let ck = load_checkpoint(&ckpt, "train-phase1")?;
        if ck.meta.config != config {
            return Err(usage("--resume with a configuration that differs from the checkpoint's"));
        }
        ck.trainer(&train)?
    } else {
        Trainer::phase1(config)?
    };
    drive(trainer, &train, &ckpt, &c.out.join("phase1.log"), training, resumed)
}

fn train_phase2(c: &Common, training: &Training, strategy: Option<&str>) -> Outcome {
    let mut config = load_config(c)?;
    let routing = routing_of(strategy, &config)?;
    if let Routing::Router(s) = routing {
        config.router.strategy = s;
    }
    let train = load_split(c, &config, "train")?;
    let ckpt = phase2_ckpt(c, routing);
    let log = c.out.join(format!("phase2-{}.log", routing.label()));
    let resumed = training.resume && ckpt.is_file();
    let trainer = if resumed {
        let ck = load_checkpoint(&ckpt, "train-phase2")?;
        if ck.meta.config != config {
            return Err(usage("--resume with a configuration that differs from the checkpoint's"));
        }
        ck.trainer(&train)?
    } else {
        let p1 = load_checkpoint(&phase1_ckpt(c), "train-phase1")?;
        if p1.meta.phase != 1 {
            return Err(usage("phase1.ckpt does not hold a phase-1 model"));
        }
        if p1.meta.config.model != config.model || p1.meta.spec_hash != config.corpus.hash() {
            return Err(usage(
                "phase-1 checkpoint was trained with a different model or corpus configuration",
            ));
        }
        Trainer::phase2(config, p1.model()?, routing, &train)?
    };
    drive(trainer, &train, &ckpt, &log, training, resumed)
}

/// The trained phase-2 model and the configuration it was trained with.
fn trained(c: &Common, strategy: Option<&str>) -> Outcome<(Checkpoint<f64>, Routing, Config)> {
    let config = load_config(c)?;
    let routing = routing_of(strategy, &config)?;
    let ck = load_checkpoint(&phase2_ckpt(c, routing), "train-phase2")?;
    let trained_with = ck.meta.config.clone();
    Ok((ck, routing, trained_with))
}

fn decode(c: &Common, strategy: Option<&str>, split_name: &str, ids: &[usize]) -> Outcome {
    let (ck, routing, config) = trained(c, strategy)?;
    let samples = load_split(c, &config, split_name)?;
    let chosen: Vec<BrainSample> = if ids.is_empty() {
        samples.iter().take(5).cloned().collect()
    } else {
        ids.iter()
            .map(|id| {
                samples
                    .iter()
                    .find(|s| s.id == *id)
                    .cloned()
                    .ok_or_else(|| {
                        let some: Vec<String> = samples.iter().take(5).map(|s| s.id.to_string()).collect();
                        usage(format!(
                            "sample {id} is not in the {split_name} split (its ids include {})",
                            some.join(", ")
                        ))
                    })
            })
            .collect::<Outcome<_>>()?
    };
    let report = evaluate(&ck.model()?, &config, routing, split_name, &chosen)?;
    let vocab = Vocabulary::new(config.corpus.vocab)?;
    println!("id\ttoken_ids\ttext\treference");
    for r in &report.samples {
        let ids: Vec<String> = r.hypothesis.iter().map(|t| t.to_string()).collect();
        println!(
            "{}\t{}\t{}\t{}",
            r.id,
            ids.join(" "),
            vocab.decode(&r.hypothesis),
            vocab.decode(&r.reference)
        );
    }
    Ok(())
}

fn eval_path(c: &Common, routing: Routing, split: &str) -> PathBuf {
    c.out.join(format!("eval-{}-{split}.tsv", routing.label()))
}

fn eval(c: &Common, strategy: Option<&str>, split_name: &str) -> Outcome {
    let (ck, routing, config) = trained(c, strategy)?;
    let samples = load_split(c, &config, split_name)?;
    let report = evaluate(&ck.model()?, &config, routing, split_name, &samples)?;
    let vocab = Vocabulary::new(config.corpus.vocab)?;
    let path = eval_path(c, routing, split_name);
    fs::write(&path, report.to_text(&vocab)).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "{}\t{split_name}\tbleu1 {:.4}\tbleu4 {:.4}\trouge1 {:.4}\trougeL {:.4}\twer {:.2}\tagreement {:.3}",
        routing.label(),
        report.bleu[0],
        report.bleu[3],
        report.rouge1,
        report.rouge_l,
        report.wer,
        report.agreement
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn analyze(c: &Common, strategy: Option<&str>, split_name: &str, window: usize) -> Outcome {
    let config = load_config(c)?;
    let routing = routing_of(strategy, &config)?;
    let path = eval_path(c, routing, split_name);
    if !path.is_file() {
        return Err(usage(format!("{} not found; run eval first", path.display())));
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let weights = EvalReport::parse_weights(&text)?;
    let samples = load_split(c, &config, split_name)?;
    let analysis = covariate_analysis(&weights, &samples, window)?;
    let out = c.out.join(format!("analysis-{}-{split_name}.tsv", routing.label()));
    fs::write(&out, analysis.to_tsv()).with_context(|| format!("writing {}", out.display()))?;
    let p = analysis.pearson;
    println!("r\t{}\np\t{}\nn\t{}", p.r, p.p, p.n);
    println!("wrote {}", out.display());
    Ok(())
}

fn gradcheck(seeds: u64) -> Outcome {
    let entries = training::full_suite(seeds, 1e-6, 1e-4)?;
    for e in &entries {
        println!(
            "{}\t{}\tmax_rel_err {:.3e}\tchecked {}",
            if e.report.passed { "pass" } else { "FAIL" },
            e.name,
            e.report.max_rel_err,
            e.report.checked
        );
    }
    if training::all_passed(&entries) {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("gradient check failed")))
    }
}
