use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pmnet::checkpoint::Checkpoint;
use pmnet::eval::{self, AblationSpec};
use pmnet::experiment::{self, ExperimentConfig, TaskConfig};
use pmnet::task::{self, CopyPasteConfig};
use pmnet::{gradcheck, rng, scan};

const OUT_ENV: &str = "PMNET_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "pmnet",
    version,
    about = "Phasor memory network: training, evaluation and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON experiment config; writes metrics.jsonl and checkpoints.
    Train(TrainArgs),
    /// Copy-paste exact accuracy per source length N.
    EvalCopy(EvalCopyArgs),
    /// Bits per byte on a corpus, bucketed by position.
    EvalBpb(EvalBpbArgs),
    /// Cumulative delta-BPB of an ablation against the intact model.
    Ablate(AblateArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Segmented scan vs sequential recurrence timing.
    ScanBench(ScanBenchArgs),
    /// Print a checkpoint's header, config and tensor shapes.
    InspectCkpt(InspectArgs),
}

#[derive(Args)]
struct OutArg {
    /// Output directory [default: $PMNET_OUT_DIR, else ./pmnet-out]
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("pmnet-out"))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    out: OutArg,
    /// `key=value` overrides, dotted (`model.d_model=64`) or bare (`memory_enabled=false`).
    overrides: Vec<String>,
}

#[derive(Args)]
struct CkptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Experiment config the checkpoint must match; defaults to the one embedded in it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCopyArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    /// `start:end:step`, inclusive.
    #[arg(long, default_value = "2:96:2")]
    n_grid: String,
    #[arg(long, default_value_t = 64)]
    trials: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Recurrent chunk length [default: whole sequence].
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long, default_value = "none")]
    ablation: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct EvalBpbArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 8192)]
    context: usize,
    /// Window stride [default: context].
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 256)]
    chunk: usize,
    #[arg(long, default_value = "none")]
    ablation: String,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    ckpt: CkptArgs,
    /// Comma-separated: disable_updates, zero_all, zero_root, zero_leaf, disable_recurrence, none.
    #[arg(long)]
    mode: String,
    /// Byte corpus to evaluate; without it, copy-paste documents are sampled.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Corpus prefix length in bytes.
    #[arg(long, default_value_t = 4096)]
    length: usize,
    /// Number of copy-paste documents when no corpus is given.
    #[arg(long, default_value_t = 16)]
    docs: usize,
    /// Copy-paste source length [default: task n_max].
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 256)]
    chunk: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct ScanBenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096,16384")]
    sizes: Vec<usize>,
    /// Memory groups tokens are routed among.
    #[arg(long, default_value_t = 85)]
    groups: usize,
    /// Values per token (slots x memory width).
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct InspectArgs {
    ckpt: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_model(args: &CkptArgs) -> Result<(Checkpoint<f32>, Option<ExperimentConfig>), Failure> {
    let ckpt = Checkpoint::<f32>::load(&args.ckpt)
        .map_err(|e| anyhow::anyhow!("loading {}: {e}", args.ckpt.display()))?;
    let exp = match &args.config {
        Some(path) => {
            let exp = ExperimentConfig::load(path, &[]).map_err(usage)?;
            if exp.model != ckpt.config.model {
                ckpt.params.check_against(&exp.model).map_err(usage)?;
            }
            Some(exp)
        }
        None => serde_json::from_value(ckpt.config.experiment.clone()).ok(),
    };
    ckpt.params
        .check_against(&ckpt.config.model)
        .map_err(usage)?;
    Ok((ckpt, exp))
}

fn copy_task(exp: &Option<ExperimentConfig>) -> CopyPasteConfig {
    match exp.as_ref().map(|e| &e.task) {
        Some(TaskConfig::CopyPaste(c)) => c.clone(),
        _ => CopyPasteConfig::default(),
    }
}

fn write_csv(dir: &Path, name: &str, body: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, body)?;
    Ok(path)
}

fn parse_grid(spec: &str) -> Result<Vec<usize>, Failure> {
    let parts: Vec<usize> = spec
        .split(':')
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad --n-grid `{spec}`: expected start:end:step")))?;
    let (start, end, step) = match parts.as_slice() {
        [a, b] => (*a, *b, 1),
        [a, b, c] => (*a, *b, *c),
        _ => {
            return Err(usage(format!(
                "bad --n-grid `{spec}`: expected start:end:step"
            )))
        }
    };
    if start == 0 || step == 0 || end < start {
        return Err(usage(format!("bad --n-grid `{spec}`")));
    }
    Ok((start..=end).step_by(step).collect())
}

fn train(a: TrainArgs) -> CmdResult {
    let mut overrides = a.overrides;
    if let Some(seed) = a.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(w) = a.workers {
        overrides.push(format!("train.workers={w}"));
    }
    if !a.config.exists() {
        return Err(usage(format!(
            "config file {} not found",
            a.config.display()
        )));
    }
    let cfg = ExperimentConfig::load(&a.config, &overrides).map_err(usage)?;
    let dir = a.out.dir();
    let out = experiment::run_experiment(&cfg, &dir)?;
    println!("metrics     {}", out.metrics.display());
    println!("checkpoint  {}", out.final_checkpoint.display());
    println!("train loss  {:.4} nats", out.final_train_loss);
    if let Some(l) = out.final_eval_loss {
        println!("eval loss   {l:.4} nats");
    }
    Ok(())
}

fn eval_copy(a: EvalCopyArgs) -> CmdResult {
    let grid = parse_grid(&a.n_grid)?;
    let ablation = AblationSpec::parse(&a.ablation).map_err(usage)?;
    let (ckpt, exp) = load_model(&a.ckpt)?;
    let cfg = &ckpt.config.model;
    let task = copy_task(&exp);
    let chunk = a.chunk.unwrap_or(cfg.max_seq_len);
    let rows = eval::exact_accuracy(
        cfg,
        &ckpt.params,
        &task,
        &grid,
        a.trials,
        &ablation,
        a.seed,
        a.batch,
        chunk,
    )
    .map_err(usage)?;
    let mut csv = String::from("n,accuracy,positions\n");
    println!("{:>5} {:>9}", "N", "accuracy");
    for r in &rows {
        writeln!(csv, "{},{},{}", r.n, r.accuracy, r.positions).expect("string write");
        println!("{:>5} {:>9.4}", r.n, r.accuracy);
    }
    let path = write_csv(&a.out.dir(), "copy_accuracy.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn eval_bpb(a: EvalBpbArgs) -> CmdResult {
    let ablation = AblationSpec::parse(&a.ablation).map_err(usage)?;
    let (ckpt, _) = load_model(&a.ckpt)?;
    let corpus = std::fs::read(&a.corpus)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", a.corpus.display()))?;
    let stride = a.stride.unwrap_or(a.context);
    let rows = eval::bpb_eval(
        &ckpt.config.model,
        &ckpt.params,
        &corpus,
        a.context,
        stride,
        a.chunk,
        &ablation,
    )?;
    let mut csv = String::from("bucket_lo,bucket_hi,bpb,count\n");
    println!("{:>14} {:>8} {:>8}", "positions", "bpb", "count");
    for r in &rows {
        writeln!(csv, "{},{},{},{}", r.lo, r.hi, r.bpb, r.count).expect("string write");
        println!(
            "{:>14} {:>8.4} {:>8}",
            format!("[{},{})", r.lo, r.hi),
            r.bpb,
            r.count
        );
    }
    let path = write_csv(&a.out.dir(), "bpb_buckets.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> CmdResult {
    let ablation = AblationSpec::parse(&a.mode).map_err(usage)?;
    let (ckpt, exp) = load_model(&a.ckpt)?;
    let cfg = &ckpt.config.model;
    let docs: Vec<Vec<u8>> = match &a.corpus {
        Some(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
            vec![bytes[..a.length.min(bytes.len())].to_vec()]
        }
        None => {
            let task = copy_task(&exp);
            let n = a.n.unwrap_or(task.n_max);
            let cp = CopyPasteConfig {
                n_min: n,
                n_max: n,
                ..task
            };
            cp.validate(cfg.max_seq_len).map_err(usage)?;
            let mut r = rng::stream(a.seed, "ablate");
            (0..a.docs)
                .map(|_| task::sample_instance(&mut r, &cp, n).bytes())
                .collect()
        }
    };
    let curve = eval::cumulative_delta_bpb(cfg, &ckpt.params, &ablation, &docs, a.chunk)?;
    let mut csv = String::from("position,cumulative_delta_bpb\n");
    for (i, v) in curve.iter().enumerate() {
        writeln!(csv, "{i},{v}").expect("string write");
    }
    let name = format!("delta_bpb_{}.csv", a.mode.replace(',', "+"));
    let path = write_csv(&a.out.dir(), &name, &csv)?;
    println!(
        "mode {}: {} positions, final cumulative delta {:.4} bits",
        a.mode,
        curve.len(),
        curve.last().copied().unwrap_or(0.0)
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> CmdResult {
    let fault = a
        .inject_fault
        .as_deref()
        .map(gradcheck::parse_fault)
        .transpose()
        .map_err(usage)?;
    let report = gradcheck::run_suite(a.seed, a.instances, fault)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!("gradient check failed")))
    }
}

fn scan_bench(a: ScanBenchArgs) -> CmdResult {
    if a.groups == 0 || a.width == 0 {
        return Err(usage("--groups and --width must be positive"));
    }
    let rows = scan::bench(&a.sizes, a.groups, a.width, a.reps, a.seed)?;
    let mut csv = String::from("S,K,t_scan_ns,t_seq_ns,speedup\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{:.4}",
            r.s,
            r.k,
            r.t_scan_ns,
            r.t_seq_ns,
            r.speedup()
        )
        .expect("string write");
    }
    print!("{csv}");
    let path = write_csv(&a.out.dir(), "scan_bench.csv", &csv)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> CmdResult {
    let ckpt = Checkpoint::<f32>::load(&a.ckpt)
        .map_err(|e| anyhow::anyhow!("loading {}: {e}", a.ckpt.display()))?;
    println!("step        {}", ckpt.step);
    println!("seed        {}", ckpt.seed);
    println!("parameters  {}", ckpt.params.numel());
    println!("model       {}", serde_json::to_string(&ckpt.config.model)?);
    if !ckpt.config.experiment.is_null() {
        println!(
            "experiment  {}",
            serde_json::to_string(&ckpt.config.experiment)?
        );
    }
    for (name, t) in &ckpt.params.tensors {
        println!("  {name:<32} {:?}", t.shape());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::EvalCopy(a) => eval_copy(a),
        Command::EvalBpb(a) => eval_bpb(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::ScanBench(a) => scan_bench(a),
        Command::InspectCkpt(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
