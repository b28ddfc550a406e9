//! Command-line front end.
//!
//! Every flag may also be given in a flat `key = value` config file passed
//! with `--config`; keys are the long flag names with `_` for `-`. Flags win
//! over the file. Exit codes: 0 success, 1 usage or configuration error, 2
//! data, format or gradient-check failure.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::bench::{bench_block_pair, bench_model, emit_results, speedup, BenchConfig};
use crate::complexity::{count_model, emit_report, Convention};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, FdConfig, TOLERANCE};
use crate::io::{encode_pgm16, load_tensor, read_ppm};
use crate::model::{attention_maps, load_checkpoint, save_checkpoint, Model, Toggles, VariantSpec};
use crate::tensor::Tensor;
use crate::trainer::{evaluate, make_synth, train_toy_with, write_history, TrainConfig, NUM_SYNTH_CLASSES, SYNTH_SIDE};

/// Every key a config file may contain.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "variant",
    "input",
    "meta_len",
    "num_classes",
    "use_ca_stage",
    "use_meta_stem",
    "use_meta_pooling",
    "dca_sequential",
    "format",
    "convention",
    "out",
    "n",
    "m",
    "d",
    "e",
    "iters",
    "warmup",
    "model",
    "threads",
    "steps",
    "batch_size",
    "lr",
    "optimizer",
    "weight_decay",
    "label_smoothing",
    "samples",
    "noise",
    "checkpoint",
    "history",
    "image",
    "out_dir",
];

#[derive(Parser, Debug)]
#[command(name = "lemevit", version, about = "Meta-token vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer MAC, parameter and closed-form cost report.
    Analyze(AnalyzeArgs),
    /// DCA-vs-SA block latency, or whole-model throughput with --model.
    Bench(BenchArgs),
    /// Finite-difference check of every block type and the desk-scale model.
    Gradcheck(GradcheckArgs),
    /// Train on the synthetic texture set; writes a checkpoint and history CSV.
    Train(TrainArgs),
    /// Print logits for an image (.ten or .ppm).
    Infer(InferArgs),
    /// Write one attention map per meta token as 16-bit PGM plus a CSV.
    Attmap(AttmapArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat key=value file supplying defaults for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// tiny, small, base or tiny-narrow.
    #[arg(long)]
    variant: Option<String>,
    /// Square input side in pixels (multiple of 32).
    #[arg(long)]
    input: Option<usize>,
    #[arg(long)]
    meta_len: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    use_ca_stage: Option<bool>,
    #[arg(long)]
    use_meta_stem: Option<bool>,
    #[arg(long)]
    use_meta_pooling: Option<bool>,
    #[arg(long)]
    dca_sequential: Option<bool>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// table, csv or json.
    #[arg(long)]
    format: Option<String>,
    /// table (2NMD for DCA attention) or strict (4NMD).
    #[arg(long)]
    convention: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    e: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Benchmark the whole model of --variant at --input instead of a block pair.
    #[arg(long)]
    model: Option<bool>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// sgd-momentum or adamw-lite.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Synthetic dataset size.
    #[arg(long)]
    samples: Option<usize>,
    /// Gaussian noise sigma of the synthetic images.
    #[arg(long)]
    noise: Option<f64>,
    /// Checkpoint output path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// History CSV output path.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to load; a freshly initialised model is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input image, `.ten` tensor file or binary PPM.
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttmapArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Directory receiving `meta_XX.pgm` files and `maps.csv`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Parses a `key = value` file. Blank lines and `#` comments are skipped;
/// unknown or repeated keys are rejected.
pub fn parse_config(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let key = k.trim().replace('-', "_");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
        }
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key {key:?} given twice", lineno + 1)));
        }
    }
    Ok(map)
}

/// Flag values layered over config-file values.
struct Settings {
    file: HashMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => parse_config(&fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
            None => HashMap::new(),
        };
        Ok(Self { file })
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse {raw:?}"))),
            None => Ok(None),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }
}

struct Resolved {
    settings: Settings,
    seed: u64,
    spec: VariantSpec,
    input: Option<usize>,
}

fn resolve(c: Common, default_variant: &str) -> Result<Resolved> {
    let settings = Settings::load(c.config.as_deref())?;
    let seed = settings.or(c.seed, "seed", 0)?;
    let name: String = settings.or(c.variant, "variant", default_variant.to_string())?;
    let mut spec = VariantSpec::by_name(&name)?;
    if let Some(m) = settings.get(c.meta_len, "meta_len")? {
        spec.meta_len = m;
    }
    if let Some(k) = settings.get(c.num_classes, "num_classes")? {
        spec.num_classes = k;
    }
    let t = spec.toggles;
    spec.toggles = Toggles {
        use_ca_stage: settings.or(c.use_ca_stage, "use_ca_stage", t.use_ca_stage)?,
        use_meta_stem: settings.or(c.use_meta_stem, "use_meta_stem", t.use_meta_stem)?,
        use_meta_pooling: settings.or(c.use_meta_pooling, "use_meta_pooling", t.use_meta_pooling)?,
        dca_sequential: settings.or(c.dca_sequential, "dca_sequential", t.dca_sequential)?,
    };
    spec.validate()?;
    let input = settings.get(c.input, "input")?;
    Ok(Resolved {
        settings,
        seed,
        spec,
        input,
    })
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        read_ppm(path)
    } else {
        load_tensor(path)?.to_tensor()
    }
}

fn model_for(r: &Resolved, checkpoint: Option<&Path>, out: &mut dyn Write) -> Result<Model<f32>> {
    match checkpoint {
        Some(p) => load_checkpoint(r.spec.clone(), p),
        None => {
            writeln!(out, "no checkpoint given; using a fresh model initialised from the seed")?;
            Model::new(r.spec.clone(), r.seed)
        }
    }
}

/// Runs one command line, writing normal output to `out`. Returns the
/// process exit code for outcomes that are not errors (a failed gradient
/// check returns 2).
pub fn run(argv: &[String], out: &mut dyn Write) -> Result<i32> {
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => Error::Usage(String::new()),
        _ => Error::Usage(e.render().to_string()),
    });
    let cli = match cli {
        Ok(c) => c,
        Err(Error::Usage(msg)) if msg.is_empty() => {
            // --help / --version: clap renders these itself.
            let text = Cli::try_parse_from(argv).unwrap_err().render().to_string();
            write!(out, "{text}")?;
            return Ok(0);
        }
        Err(e) => return Err(e),
    };
    match cli.command {
        Command::Analyze(a) => analyze(a, out),
        Command::Bench(a) => bench(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Train(a) => train(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Attmap(a) => attmap(a, out),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

/// Entry point used by the binary: runs `argv`, prints errors to stderr and
/// returns the exit code.
pub fn dispatch(argv: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(argv, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            let _ = lock.flush();
            match &e {
                Error::Usage(msg) => eprint!("{msg}"),
                other => eprintln!("error: {other}"),
            }
            exit_code(&e)
        }
    }
}

fn analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<i32> {
    let r = resolve(a.common, "tiny")?;
    let s = &r.settings;
    let side = r.input.unwrap_or(224);
    let format = s.or(a.format, "format", "table".to_string())?;
    let convention: Convention = s.or(a.convention, "convention", "table".to_string())?.parse()?;
    let report = count_model(&r.spec, (side, side), convention)?;
    let text = emit_report(&report, &format)?;
    writeln!(out, "seed: {}", r.seed)?;
    match s.get(a.out, "out")? {
        Some(path) => {
            fs::write(&path, text)?;
            writeln!(out, "wrote {}", path.display())?;
        }
        None => write!(out, "{text}")?,
    }
    Ok(0)
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> Result<i32> {
    let r = resolve(a.common, "tiny")?;
    let s = &r.settings;
    let cfg = BenchConfig {
        warmup: s.or(a.warmup, "warmup", BenchConfig::default().warmup)?,
        iters: s.or(a.iters, "iters", BenchConfig::default().iters)?,
        seed: r.seed,
    };
    let format = s.or(a.format, "format", "table".to_string())?;
    writeln!(out, "seed: {}", r.seed)?;
    if s.or(a.model, "model", false)? {
        let side = r.input.unwrap_or(64);
        let threads = s.or(a.threads, "threads", 1)?;
        let res = bench_model(&r.spec, (side, side), &cfg, threads)?;
        write!(out, "{}", emit_results(&[res], &format)?)?;
    } else {
        let n = s.or(a.n, "n", 3136)?;
        let m = s.or(a.m, "m", r.spec.meta_len)?;
        let d = s.or(a.d, "d", 64)?;
        let e = s.or(a.e, "e", 4)?;
        let (dca, sa) = bench_block_pair(n, m, d, e, &cfg)?;
        write!(out, "{}", emit_results(&[dca.clone(), sa.clone()], &format)?)?;
        if format == "table" {
            writeln!(out, "speedup (sa median / dca median): {:.3}", speedup(&dca, &sa))?;
        }
    }
    Ok(0)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let r = resolve(a.common, "tiny-narrow")?;
    let cfg = FdConfig {
        seed: r.seed,
        ..FdConfig::default()
    };
    writeln!(out, "seed: {}", r.seed)?;
    let reports = run_suite(&cfg)?;
    let mut worst: f64 = 0.0;
    for rep in &reports {
        worst = worst.max(rep.max_rel_err);
        writeln!(
            out,
            "{:<16} max_rel_err={:.3e} checked={} worst_at={} {}",
            rep.case,
            rep.max_rel_err,
            rep.checked,
            rep.worst,
            if rep.passed() { "ok" } else { "FAIL" }
        )?;
    }
    writeln!(out, "max rel err: {worst:.3e} (threshold {TOLERANCE:e})")?;
    Ok(if reports.iter().all(|r| r.passed()) { 0 } else { 2 })
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut r = resolve(a.common, "tiny-narrow")?;
    r.spec.num_classes = NUM_SYNTH_CLASSES;
    let s = &r.settings;
    if let Some(side) = r.input {
        if side != SYNTH_SIDE {
            return Err(Error::Config(format!("training images are {SYNTH_SIDE}x{SYNTH_SIDE}; --input {side} not supported")));
        }
    }
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        steps: s.or(a.steps, "steps", d.steps)?,
        batch_size: s.or(a.batch_size, "batch_size", d.batch_size)?,
        lr: s.or(a.lr, "lr", d.lr)?,
        optimizer: s.or(a.optimizer, "optimizer", "adamw-lite".to_string())?.parse()?,
        weight_decay: s.or(a.weight_decay, "weight_decay", d.weight_decay)?,
        seed: r.seed,
        label_smoothing: s.or(a.label_smoothing, "label_smoothing", d.label_smoothing)?,
    };
    cfg.validate()?;
    let samples = s.or(a.samples, "samples", 300)?;
    let noise = s.or(a.noise, "noise", 0.1)?;
    let ckpt = s.or(a.checkpoint, "checkpoint", PathBuf::from("lemevit.lmvt"))?;
    let hist = s.or(a.history, "history", PathBuf::from("history.csv"))?;
    writeln!(out, "seed: {}", r.seed)?;
    let ds = make_synth(samples, noise, r.seed)?;
    let mut model = Model::<f32>::new(r.spec.clone(), r.seed)?;
    let mut log_err = None;
    let history = train_toy_with(&mut model, &ds, &cfg, |row| {
        if row.step % 10 == 0 || row.step + 1 == cfg.steps {
            if let Err(e) = writeln!(out, "step {:>4} loss {:.4} acc {:.3}", row.step, row.loss, row.acc) {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let acc = evaluate(&model, &ds)?;
    write_history(&hist, &history)?;
    save_checkpoint(&model, &ckpt)?;
    writeln!(out, "train accuracy: {acc:.4}")?;
    writeln!(out, "wrote {} and {}", ckpt.display(), hist.display())?;
    Ok(0)
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Usage(format!("--{what} is required\n")))
}

fn infer(a: InferArgs, out: &mut dyn Write) -> Result<i32> {
    let r = resolve(a.common, "tiny-narrow")?;
    let s = &r.settings;
    let image_path = required(s.get(a.image, "image")?, "image")?;
    let checkpoint = s.get(a.checkpoint, "checkpoint")?;
    writeln!(out, "seed: {}", r.seed)?;
    let model = model_for(&r, checkpoint.as_deref(), out)?;
    let image = read_image(&image_path)?;
    let logits = model.forward_classify(&image)?;
    let values: Vec<String> = logits.data().iter().map(|v| format!("{v:.6}")).collect();
    writeln!(out, "logits: {}", values.join(" "))?;
    writeln!(out, "argmax: {}", crate::trainer::argmax(logits.data()))?;
    Ok(0)
}

fn attmap(a: AttmapArgs, out: &mut dyn Write) -> Result<i32> {
    let r = resolve(a.common, "tiny-narrow")?;
    let s = &r.settings;
    let image_path = required(s.get(a.image, "image")?, "image")?;
    let checkpoint = s.get(a.checkpoint, "checkpoint")?;
    let dir = s.or(a.out_dir, "out_dir", PathBuf::from("attmaps"))?;
    writeln!(out, "seed: {}", r.seed)?;
    let model = model_for(&r, checkpoint.as_deref(), out)?;
    let image = read_image(&image_path)?;
    let maps = attention_maps(&model.forward(&image, true)?)?;
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join("maps.csv")).map_err(crate::io::csv_err)?;
    w.write_record(["meta", "row", "col", "weight"]).map_err(crate::io::csv_err)?;
    for map in &maps {
        let pgm = encode_pgm16(&map.normalized(), map.height, map.width)?;
        fs::write(dir.join(format!("meta_{:02}.pgm", map.meta_index)), pgm)?;
        for (i, v) in map.values.iter().enumerate() {
            w.write_record([
                map.meta_index.to_string(),
                (i / map.width).to_string(),
                (i % map.width).to_string(),
                v.to_string(),
            ])
            .map_err(crate::io::csv_err)?;
        }
    }
    w.flush()?;
    writeln!(out, "wrote {} maps ({}x{}) to {}", maps.len(), maps[0].height, maps[0].width, dir.display())?;
    Ok(0)
}
