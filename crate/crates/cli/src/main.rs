//! `laconv` command-line tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use laconv::checkpoint::Checkpoint;
use laconv::cost;
use laconv::net::{self, block_name, HeadKind, LaConvNet, NetConfig};
use laconv::params::Session;
use laconv::synth::{self, Example, Kind, Split, DATASET_FILE};
use laconv::text::TokenBatch;
use laconv::train::{self, TrainConfig};
use laconv::{par, Error, Tensor};
use serde_json::json;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "laconv", version, about = "Language-guided dynamic convolution on a synthetic grounding task")]
struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Omit timestamps from log lines and run summaries.
    #[arg(long, global = true)]
    no_timestamp: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic referring-grid dataset.
    GenData(GenDataArgs),
    /// Train a network on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Print the per-layer parameter and FLOP table of a configuration.
    Cost(CostArgs),
    /// Dump the affinity, condition and kernels of one block for one input.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    /// Attribute and spatial expressions, answered by pointing at a cell.
    Locate,
    /// Count and existence questions with a closed answer set.
    Answer,
}

impl Task {
    fn kinds(self) -> &'static [Kind] {
        match self {
            Task::Locate => &Kind::LOCATE,
            Task::Answer => &Kind::ANSWER,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n_train: usize,
    #[arg(long, default_value_t = 2_000)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Task::Locate)]
    task: Task,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory holding the dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "toy")]
    config: String,
    /// JSON training options; explicit flags take precedence.
    #[arg(long)]
    config_file: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long)]
    config: String,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, default_value_t = 8)]
    text_len: usize,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    expression: String,
    #[arg(long, default_value_t = 0)]
    image_seed: u64,
    /// Block as `stage.block`, both counted from 1.
    #[arg(long)]
    layer: String,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) => EXIT_USAGE,
        Error::Io(_) | Error::Parse { .. } | Error::Version { .. } | Error::Checkpoint(_) | Error::Json(_) => EXIT_IO,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Shape(_) | Error::Generation(_) => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let mut log = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if cli.no_timestamp {
        log.format_timestamp(None);
    }
    log.init();
    if cli.sequential {
        par::set_enabled(false);
    }
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a, cli.no_timestamp),
        Command::Eval(a) => eval(a),
        Command::Cost(a) => cost_table(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(a: &GenDataArgs) -> laconv::Result<()> {
    let examples = synth::generate(a.n_train, a.n_test, a.seed, a.task.kinds())?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(DATASET_FILE);
    synth::write_dataset(&path, &examples)?;
    println!("wrote {} train / {} test examples to {}", a.n_train, a.n_test, path.display());
    Ok(())
}

/// Prefixes IO errors with the offending path.
fn with_path<T>(path: &Path, r: laconv::Result<T>) -> laconv::Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_data(dir: &Path) -> laconv::Result<Vec<Example>> {
    let path = dir.join(DATASET_FILE);
    with_path(&path, synth::read_dataset(&path))
}

fn head_for(examples: &[Example]) -> laconv::Result<HeadKind> {
    let locate = examples.iter().filter(|e| e.kind.is_locate()).count();
    match (locate, examples.len() - locate) {
        (0, 0) => Err(Error::Input("dataset is empty".into())),
        (_, 0) => Ok(HeadKind::Locate),
        (0, _) => Ok(HeadKind::Answer),
        _ => Err(Error::Input("dataset mixes locate and answer kinds".into())),
    }
}

/// Defaults, then the config file, then explicit flags.
fn train_config(a: &TrainArgs) -> laconv::Result<TrainConfig> {
    let mut cfg = match &a.config_file {
        Some(p) => serde_json::from_str(&with_path(p, fs::read_to_string(p).map_err(Error::from))?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = a.eval_interval {
        cfg.eval_interval = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Network for the synthetic images: the named configuration at the dataset
/// resolution with the head the data calls for.
fn net_config(name: &str, head: HeadKind) -> laconv::Result<NetConfig> {
    let mut cfg = net::build(name)?.with_resolution(synth::IMAGE_PX);
    cfg.head = head;
    cfg.audit()?;
    if head == HeadKind::Locate && cfg.final_resolution() != synth::GRID {
        return Err(Error::Config(format!(
            "{name} ends at {0}x{0}, but locating needs the {1}x{1} grid",
            cfg.final_resolution(),
            synth::GRID
        )));
    }
    Ok(cfg)
}

fn run_train(a: &TrainArgs, no_timestamp: bool) -> laconv::Result<()> {
    let cfg = train_config(a)?;
    let data = load_data(&a.data)?;
    let (train_set, test_set) = (synth::split(&data, Split::Train), synth::split(&data, Split::Test));
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Input("dataset needs both train and test examples".into()));
    }
    let net_cfg = net_config(&a.config, head_for(&data)?)?;
    let vocab = synth::vocabulary();
    let net = LaConvNet::new(net_cfg, vocab.len())?;
    let mut store = net.init::<f32>(cfg.seed)?;
    log::info!(
        "training {} ({} parameters) on {} examples, testing on {}",
        a.config,
        store.trainable_count(),
        train_set.len(),
        test_set.len()
    );
    let start = Instant::now();
    let report = train::fit(&net, &mut store, &train_set, &test_set, &vocab, &cfg, Some(&a.out))?;
    let secs = start.elapsed().as_secs_f64();
    let mut summary = json!({
        "config": a.config,
        "train": cfg,
        "best_epoch": report.best_epoch,
        "best": report.best,
        "last": report.last,
    });
    if !no_timestamp {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        summary["finished_unix"] = json!(now);
        summary["wall_clock_secs"] = json!(secs);
    }
    let mut f = fs::File::create(a.out.join("run.json"))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    println!(
        "best epoch {}: accuracy {:.4}; last epoch accuracy {:.4}",
        report.best_epoch, report.best.accuracy, report.last.accuracy
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> laconv::Result<()> {
    let (net, store, meta) = with_path(&a.checkpoint, train::load_model(&a.checkpoint))?;
    let data = load_data(&a.data)?;
    let which = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let examples = synth::split(&data, which);
    let m = train::evaluate(&net, &store, &examples, &meta.vocab, a.batch_size)?;
    println!("{}", serde_json::to_string(&json!({ "epoch": meta.epoch, "metrics": m }))?);
    Ok(())
}

fn cost_table(a: &CostArgs) -> laconv::Result<()> {
    let mut cfg = net::build(&a.config)?;
    if let Some(r) = a.resolution {
        cfg = cfg.with_resolution(r);
    }
    let report = cost::report(&cfg, a.text_len)?;
    let text = cost::text_encoder(&cfg.text, synth::vocabulary().len(), a.text_len);
    print!("{}", report.to_table());
    println!("text encoder (separate): params {} flops {}", text.params, text.flops);
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn parse_layer(s: &str) -> laconv::Result<(usize, usize)> {
    let bad = || Error::Input(format!("layer must be `stage.block` counted from 1, got `{s}`"));
    let (i, j) = s.split_once('.').ok_or_else(bad)?;
    let i: usize = i.parse().map_err(|_| bad())?;
    let j: usize = j.parse().map_err(|_| bad())?;
    if i == 0 || j == 0 {
        return Err(bad());
    }
    Ok((i, j))
}

fn inspect(a: &InspectArgs) -> laconv::Result<()> {
    let (stage, block) = parse_layer(&a.layer)?;
    let (net, mut store, meta) = with_path(&a.checkpoint, train::load_model(&a.checkpoint))?;
    let st = net.cfg.stages.get(stage - 1).filter(|st| block <= st.blocks).ok_or_else(|| {
        Error::Input(format!("{} has no block {stage}.{block}", net.cfg.name))
    })?;
    let (k, groups) = (st.kernel, st.groups);
    let prefix = block_name(stage, block);
    let tokens = TokenBatch::new(&[meta.vocab.tokenize(&a.expression)?], net.cfg.text.max_len)?;
    let image = synth::render(&synth::gen_scene(a.image_seed)?);
    let image = image.reshape([1, synth::IMAGE_PX, synth::IMAGE_PX, 3])?;

    let mut s = Session::new(&mut store, false);
    s.set_capture(Some(prefix.clone()));
    let x = s.graph.constant(image);
    let logits = net.logits(&mut s, x, &tokens)?;
    s.graph.status()?;
    let scores = s.graph.value(logits).to_vec();
    let captured = s.captured().clone();

    let mut ck = Checkpoint::new(json!({
        "layer": prefix,
        "expression": a.expression,
        "image_seed": a.image_seed,
        "kernel": k,
        "groups": groups,
    }));
    for (what, &v) in &captured {
        ck.push(what.clone(), &Tensor::new(s.graph.shape(v).to_vec(), s.graph.value(v).to_vec())?);
    }
    fs::create_dir_all(&a.out)?;
    ck.save(a.out.join("inspect.lckp"))?;

    // kernels are [1, h, w, k, k, g]; one L2 norm per (position, group)
    let kv = captured.get("kernels").ok_or_else(|| Error::Input(format!("{prefix} produced no kernels")))?;
    let w = s.graph.value(*kv);
    let mut csv = String::from("position,group,kernel_l2\n");
    for (pos, taps) in w.chunks_exact(k * k * groups).enumerate() {
        for g in 0..groups {
            let ss: f64 = taps.iter().skip(g).step_by(groups).map(|&t| f64::from(t).powi(2)).sum();
            csv.push_str(&format!("{pos},{g},{}\n", ss.sqrt()));
        }
    }
    fs::write(a.out.join("kernels.csv"), csv)?;
    let best = scores.iter().enumerate().fold(0, |b, (i, v)| if *v > scores[b] { i } else { b });
    let answer = match net.cfg.head {
        HeadKind::Locate => format!("cell {best} (row {}, col {})", best / synth::GRID, best % synth::GRID),
        HeadKind::Answer => synth::answer_label(best),
    };
    println!("{prefix}: wrote {} tensors to {}; prediction {answer}", captured.len(), a.out.display());
    Ok(())
}
