use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mocha_latency::checkpoint::{load_checkpoint, load_into, save_checkpoint, Checkpoint, CheckpointError};
use mocha_latency::config::{ConfigError, RunConfig};
use mocha_latency::data::{gen_lookahead_task, gen_segmental_task, prepare, read_jsonl, write_jsonl, DataError, Sample, TaskConfig};
use mocha_latency::decode::{beam_stream_decode, export_attention_trace, greedy_stream_decode};
use mocha_latency::metrics::{evaluate, token_error_rate, LatencyReport, MetricsError};
use mocha_latency::model::{Model, EOS};
use mocha_latency::objectives::ObjectiveMode;
use mocha_latency::plot::{write_latency_histogram, AttentionTrace, PlotError};
use mocha_latency::training::{train, train_pt_ce, EpochLog, TrainError};

#[derive(Parser)]
#[command(name = "mocha", version, about = "Streaming MoChA training, decoding and latency evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Also write a held-out split here.
        #[arg(long)]
        dev_out: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a model and save a checkpoint to --ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "baseline")]
        mode: Mode,
        #[arg(long)]
        warm_start: Option<PathBuf>,
        /// Held-out corpus for per-epoch evaluation.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        delta: Option<usize>,
        #[arg(long)]
        no_quantity_loss: bool,
        /// Zero every gold boundary in the MinLT target.
        #[arg(long)]
        zero_boundaries: bool,
    },
    /// Teacher-forced boundary latency of a checkpoint on a corpus.
    EvalLatency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        exclude_eos: bool,
    },
    /// Streaming decode of a corpus.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Write attention traces for the first N utterances into this directory.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        traces: usize,
    },
    /// Render trace or latency report files as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Trace written by `decode --trace-dir` (.json or .csv).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Report written by `eval-latency --out`, as `label=path` or `path`.
        #[arg(long)]
        report: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Baseline,
    MtlCe,
    PtCe,
    Decot,
    Minlt,
    DecotMinlt,
}

impl Mode {
    fn objective(self) -> ObjectiveMode {
        match self {
            Mode::Baseline => ObjectiveMode::Baseline,
            Mode::MtlCe => ObjectiveMode::MtlCe,
            Mode::PtCe => ObjectiveMode::PtCeStage2,
            Mode::Decot => ObjectiveMode::Decot,
            Mode::Minlt => ObjectiveMode::Minlt,
            Mode::DecotMinlt => ObjectiveMode::DecotMinlt,
        }
    }
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::NonFiniteLoss { .. } => 3,
                TrainError::Config(_) | TrainError::Objective(_) => 1,
                TrainError::Metrics(_) => 2,
            };
        }
        if cause.is::<ConfigError>() {
            return 1;
        }
        if cause.is::<DataError>() || cause.is::<CheckpointError>() || cause.is::<PlotError>() || cause.is::<MetricsError>() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, dev_out, n } => gen_data(&common, dev_out.as_deref(), n),
        Command::Train { common, mode, warm_start, dev, epochs, delta, no_quantity_loss, zero_boundaries } => {
            let opts = TrainOpts { mode, warm_start, dev, epochs, delta, no_quantity_loss, zero_boundaries };
            train_cmd(&common, &opts)
        }
        Command::EvalLatency { common, exclude_eos } => eval_latency(&common, exclude_eos),
        Command::Decode { common, beam, max_len, trace_dir, traces } => decode(&common, beam, max_len, trace_dir.as_deref(), traces),
        Command::Plot { common, trace, report } => plot(&common, trace.as_deref(), &report),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.task.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => usage(format!("--{flag} is required")),
    }
}

fn generate(task: &TaskConfig) -> Vec<mocha_latency::data::Utterance> {
    if task.lookshift == 0 {
        gen_segmental_task(task)
    } else {
        gen_lookahead_task(task)
    }
}

fn gen_data(common: &Common, dev_out: Option<&Path>, n: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = required(&common.out, "out")?;
    let mut task = cfg.task.clone();
    if let Some(n) = n {
        task.n = n;
    }
    let corpus = generate(&task);
    write_jsonl(out, &corpus)?;
    eprintln!("wrote {} utterances to {}", corpus.len(), out.display());
    if let Some(dev) = dev_out {
        let dev_task = TaskConfig { n: cfg.dev_size, seed: task.seed.wrapping_add(1_000_003), ..task };
        let corpus = generate(&dev_task);
        write_jsonl(dev, &corpus)?;
        eprintln!("wrote {} utterances to {}", corpus.len(), dev.display());
    }
    Ok(())
}

fn load_samples(path: &Path, stack: usize) -> Result<Vec<Sample>> {
    let corpus = read_jsonl(path)?;
    if corpus.is_empty() {
        return Err(DataError::Invalid { id: path.display().to_string(), msg: "empty corpus".into() }.into());
    }
    Ok(prepare(&corpus, stack)?)
}

struct TrainOpts {
    mode: Mode,
    warm_start: Option<PathBuf>,
    dev: Option<PathBuf>,
    epochs: Option<usize>,
    delta: Option<usize>,
    no_quantity_loss: bool,
    zero_boundaries: bool,
}

fn train_cmd(common: &Common, opts: &TrainOpts) -> Result<()> {
    let cfg = load_config(common)?;
    let data = required(&common.data, "data")?;
    let ckpt_path = required(&common.ckpt, "ckpt")?;
    let mut tc = cfg.train.clone();
    tc.objective.mode = opts.mode.objective();
    if let Some(e) = opts.epochs {
        tc.epochs = e;
    }
    if let Some(d) = opts.delta {
        tc.objective.delta = d;
    }
    if opts.no_quantity_loss {
        tc.objective.quantity_loss = false;
    }
    if opts.zero_boundaries {
        tc.objective.minlt_zero_boundaries = true;
    }
    let warm = opts.warm_start.clone().or_else(|| tc.warm_start.as_ref().map(PathBuf::from));
    let needs_ce = matches!(opts.mode, Mode::MtlCe | Mode::PtCe);

    let mut model_cfg = match &warm {
        Some(p) => load_checkpoint(p).with_context(|| format!("warm start {}", p.display()))?.model.config,
        None => cfg.model_config(),
    };
    if needs_ce {
        model_cfg.encoder.ce_head = true;
        model_cfg.encoder.mtl_branch = cfg.model.mtl_branch.unwrap_or(model_cfg.encoder.mtl_branch);
    }
    let mut model = Model::init(model_cfg, tc.seed);
    if let Some(p) = &warm {
        let src = load_checkpoint(p)?;
        let rep = load_into(&mut model, &src.model.params, true)?;
        eprintln!("warm start: {} loaded, {} fresh", rep.loaded.len(), rep.missing.len());
    }
    let stack = model.config.encoder.frame_stack;
    let train_set = load_samples(data, stack)?;
    let dev = match &opts.dev {
        Some(p) => load_samples(p, stack)?,
        None => Vec::new(),
    };
    let print = |log: &EpochLog| println!("{}", serde_json::to_string(log).expect("log serializes"));
    let trainer = if let Mode::PtCe = opts.mode {
        train_pt_ce(&mut model, &tc, &train_set, &dev, print)?
    } else {
        train(&mut model, &tc, &train_set, &dev, print)?
    };
    let step = trainer.adam.step;
    let ckpt = Checkpoint {
        model,
        optimizer: Some(trainer.adam),
        step,
        config: serde_json::to_value(&tc).expect("config serializes"),
    };
    save_checkpoint(ckpt_path, &ckpt)?;
    eprintln!("saved {}", ckpt_path.display());
    Ok(())
}

fn load_model(common: &Common) -> Result<Model> {
    let p = required(&common.ckpt, "ckpt")?;
    Ok(load_checkpoint(p)?.model)
}

fn eval_latency(common: &Common, exclude_eos: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let model = load_model(common)?;
    let samples = load_samples(required(&common.data, "data")?, model.config.encoder.frame_stack)?;
    let ev = evaluate(&model, &samples, !exclude_eos, cfg.train.frame_ms)?;
    println!("{}", ev.report);
    println!("token_acc = {:.4}", ev.token_acc);
    if let Some(out) = &common.out {
        let text = serde_json::to_string_pretty(&ev.report).expect("report serializes");
        std::fs::write(out, text).with_context(|| format!("writing {}", out.display())).map_err(io_as_data)?;
    }
    Ok(())
}

fn io_as_data(e: anyhow::Error) -> anyhow::Error {
    e.context(DataError::Invalid { id: "output".into(), msg: "write failed".into() })
}

#[derive(Serialize)]
struct Decoded<'a> {
    id: &'a str,
    tokens: Vec<usize>,
    boundaries: Vec<usize>,
    log_prob: f64,
    ter: f64,
    max_read: Vec<usize>,
}

fn decode(common: &Common, beam: Option<usize>, max_len: Option<usize>, trace_dir: Option<&Path>, traces: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let model = load_model(common)?;
    let samples = load_samples(required(&common.data, "data")?, model.config.encoder.frame_stack)?;
    let mut bo = cfg.decode.beam_options();
    if let Some(b) = beam {
        if b == 0 {
            return usage("--beam must be >= 1");
        }
        bo.beam = b;
    }
    if let Some(m) = max_len {
        bo.max_len = m;
    }
    let mut lines = Vec::with_capacity(samples.len());
    let (mut errors, mut words) = (0.0, 0usize);
    for s in &samples {
        let (greedy, log) = greedy_stream_decode(&model, &s.frames, bo.max_len);
        let hyp = if bo.beam == 1 { greedy } else { beam_stream_decode(&model, &s.frames, &bo).remove(0) };
        let strip = |t: &[usize]| t.iter().copied().filter(|&y| y != EOS).collect::<Vec<_>>();
        let reference = strip(&s.tokens);
        let ter = token_error_rate(&strip(&hyp.tokens), &reference);
        errors += ter * reference.len() as f64;
        words += reference.len();
        let rec = Decoded { id: &s.id, tokens: hyp.tokens, boundaries: hyp.boundaries, log_prob: hyp.log_prob, ter, max_read: log.max_read };
        lines.push(serde_json::to_string(&rec).expect("record serializes"));
    }
    let text = lines.join("\n") + "\n";
    match &common.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())).map_err(io_as_data)?,
        None => print!("{text}"),
    }
    eprintln!("ter = {:.4} over {} utterances (beam {})", errors / words.max(1) as f64, samples.len(), bo.beam);
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(io_as_data)?;
        for s in samples.iter().take(traces) {
            export_attention_trace(&model, s, &dir.join(&s.id))?;
        }
    }
    Ok(())
}

fn plot(common: &Common, trace: Option<&Path>, reports: &[String]) -> Result<()> {
    let out = required(&common.out, "out")?;
    match (trace, reports.is_empty()) {
        (Some(p), true) => {
            let text = std::fs::read_to_string(p).map_err(|source| PlotError::Io { path: p.display().to_string(), source })?;
            let tr = if p.extension().is_some_and(|e| e == "csv") {
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                AttentionTrace::from_csv(&id, &text)?
            } else {
                serde_json::from_str(&text).map_err(|e| PlotError::Format(e.to_string()))?
            };
            tr.validate()?;
            std::fs::write(out, tr.to_svg()).map_err(|source| PlotError::Io { path: out.display().to_string(), source })?;
        }
        (None, false) => {
            let mut loaded = Vec::new();
            for r in reports {
                let (label, path) = r.split_once('=').unwrap_or((r.as_str(), r.as_str()));
                let text = std::fs::read_to_string(path).map_err(|source| PlotError::Io { path: path.to_string(), source })?;
                let rep: LatencyReport = serde_json::from_str(&text).map_err(|e| PlotError::Format(format!("{path}: {e}")))?;
                loaded.push((label.to_string(), rep));
            }
            write_latency_histogram(out, &loaded)?;
        }
        _ => bail!(Usage("give either --trace or one or more --report".into())),
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}
