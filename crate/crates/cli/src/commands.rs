use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fdl_core::freqstats::{dataset_csv, dataset_summary, image_csv, image_freq_summary, partition_spectrum};
use fdl_core::fsio::write_atomic;
use fdl_core::netpbm::{self, PnmImage};
use fdl_core::nn::lfe::{fixed_weights, weights_csv};
use fdl_core::nn::LossConfig;
use fdl_core::selftest::{run_selftest, SelftestOptions};
use fdl_core::toynet::{
    ablation_run, evaluate_net, load_checkpoint, save_checkpoint, synth_dataset, synth_scene, train, AblationConfig,
    CheckpointMeta, DataSpec, MiouReport, Style, ToyNet, ToyNetConfig, TrainConfig, TrainLog, Variant,
};
use fdl_core::Error;

pub const EXIT_SELFTEST: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_EMPTY: u8 = 3;
pub const EXIT_USAGE: u8 = 4;
pub const EXIT_DIVERGED: u8 = 5;

/// Only environment variable consulted: a default for `--threads`.
pub const THREADS_ENV: &str = "FDL_THREADS";

pub const LOG_FILE: &str = "log.csv";
pub const WEIGHTS_FILE: &str = "frequency_weights.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Format { .. } => EXIT_IO,
            Error::InsufficientData { .. } | Error::Degenerate(_) => EXIT_EMPTY,
            Error::Diverged { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
            Error::Config(_) | Error::InvalidSize(_) | Error::InvalidInput(_) | Error::Dimension { .. } => EXIT_USAGE,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Frequency auditing, self-tests, training, evaluation and ablations for the
/// frequency-domain segmentation toy network.
#[derive(Debug, Parser)]
#[command(name = "fdl", version)]
pub struct Cli {
    /// Worker threads for per-scene work [default: $FDL_THREADS or 1]
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Block-DCT spectrum statistics of images.
    #[command(subcommand)]
    Freqstats(FreqstatsCmd),
    /// Write synthetic scenes as PPM images with PGM label maps.
    Synth(SynthArgs),
    /// Run the built-in DCT identity and gradient checks.
    Selftest(SelftestArgs),
    /// Train one network variant and save a checkpoint directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on synthetic data.
    Eval(EvalArgs),
    /// Train and evaluate several variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Subcommand)]
pub enum FreqstatsCmd {
    /// Statistics of one PGM/PPM image.
    Image {
        path: PathBuf,
        /// Also write the row to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        block: usize,
    },
    /// Per-image statistics and the dataset summary for every *.pgm/*.ppm in a directory.
    Dataset {
        dir: PathBuf,
        /// Per-image CSV.
        #[arg(long)]
        out: PathBuf,
        /// Dataset summary CSV [default: <out stem>_summary.csv]
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        block: usize,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "night", value_parser = parse_style)]
    pub style: Style,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test hook: perturb one DCT basis entry so the DCT checks fail.
    #[arg(long)]
    pub break_dct: bool,
}

#[derive(Debug, Clone, Args)]
pub struct NetArgs {
    /// Input side length (multiple of 8).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda2: f64,
    /// Fraction of hardest pixels kept by OHEM.
    #[arg(long, default_value_t = 0.25)]
    pub keep_fraction: f64,
    #[arg(long)]
    pub no_ohem: bool,
}

impl OptimArgs {
    fn train_config(&self, seed: u64, threads: usize) -> TrainConfig {
        TrainConfig {
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            threads,
            loss: LossConfig {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                ohem_enabled: !self.no_ohem,
                ohem_keep_fraction: self.keep_fraction,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// baseline, fdl, top_k:<k> or static_all
    #[arg(long, value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Training scenes as style:seed:count[:start] [default: night:<seed>:200]
    #[arg(long, value_parser = parse_data_spec)]
    pub data: Option<DataSpec>,
    /// Held-out scenes following the training scenes; 0 evaluates on the training set.
    #[arg(long, default_value_t = 100)]
    pub test_count: usize,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Checkpoint directory; also receives the log and weight CSVs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `train` (the checkpoint's training set) or style:seed:count[:start]
    #[arg(long, default_value = "train")]
    pub data: String,
    /// Per-class IoU CSV [default: <ckpt>/eval.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_variant, default_value = "baseline,fdl,static_all")]
    pub variants: Vec<Variant>,
    /// `a..b` (inclusive) or a comma-separated list.
    #[arg(long, value_parser = parse_seeds, default_value = "1..5")]
    pub seeds: Seeds,
    #[arg(long, default_value = "night", value_parser = parse_style)]
    pub style: Style,
    #[arg(long, default_value_t = 200)]
    pub train_count: usize,
    #[arg(long, default_value_t = 100)]
    pub test_count: usize,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Directory receiving ablation.csv and summary.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seeds(pub Vec<u64>);

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_style(s: &str) -> Result<Style, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_data_spec(s: &str) -> Result<DataSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| format!("bad seed `{t}`"));
    let seeds = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(format!("empty seed range `{s}`"));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    Ok(Seeds(seeds))
}

fn resolve_threads(flag: Option<usize>) -> Result<usize, Failure> {
    let threads = match flag {
        Some(t) => t,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .parse()
                .map_err(|_| Failure::new(EXIT_USAGE, format!("{THREADS_ENV}={v} is not a thread count")))?,
            Err(_) => 1,
        },
    };
    if threads == 0 {
        return Err(Failure::new(EXIT_USAGE, "--threads must be at least 1"));
    }
    Ok(threads)
}

pub fn run(cli: Cli) -> CmdResult {
    let threads = resolve_threads(cli.threads)?;
    match cli.command {
        Command::Freqstats(cmd) => freqstats(cmd),
        Command::Synth(args) => synth(args),
        Command::Selftest(args) => selftest(args),
        Command::Train(args) => train_cmd(args, threads),
        Command::Eval(args) => eval_cmd(args),
        Command::Ablate(args) => ablate(args, threads),
    }
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", dir.display())))?;
    }
    write_atomic(path, text.as_bytes()).map_err(Failure::from)
}

fn load_gray(path: &Path) -> Result<fdl_core::Tensor, Failure> {
    let img = netpbm::read(path).map_err(|e| match e {
        Error::Io { .. } => Failure::from(e),
        other => Failure::new(EXIT_IO, format!("{}: {other}", path.display())),
    })?;
    Ok(img.to_gray())
}

fn freqstats(cmd: FreqstatsCmd) -> CmdResult {
    match cmd {
        FreqstatsCmd::Image { path, out, block } => {
            let partition = partition_spectrum(block)?;
            let summary = image_freq_summary(&load_gray(&path)?, &partition)?;
            let name = path.display().to_string();
            let csv = image_csv([(name.as_str(), &summary)]);
            if let Some(out) = out {
                write_file(&out, &csv)?;
            }
            print!("{csv}");
            Ok(())
        }
        FreqstatsCmd::Dataset { dir, out, summary, block } => {
            let partition = partition_spectrum(block)?;
            let entries = fs::read_dir(&dir).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", dir.display())))?;
            let mut files = Vec::new();
            for entry in entries {
                let entry = entry.map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", dir.display())))?;
                let path = entry.path();
                let is_image = path
                    .extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"));
                if is_image && path.is_file() {
                    files.push(path);
                }
            }
            if files.is_empty() {
                return Err(Failure::new(EXIT_EMPTY, format!("no *.pgm or *.ppm files in {}", dir.display())));
            }
            files.sort();
            let mut rows = Vec::with_capacity(files.len());
            for f in &files {
                let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
                rows.push((name, image_freq_summary(&load_gray(f)?, &partition)?));
            }
            let sums: Vec<_> = rows.iter().map(|(_, s)| *s).collect();
            let ds = dataset_summary(&sums)?;
            write_file(&out, &image_csv(rows.iter().map(|(n, s)| (n.as_str(), s))))?;
            let summary_path = summary.unwrap_or_else(|| {
                let stem = out.file_stem().unwrap_or_default().to_string_lossy();
                out.with_file_name(format!("{stem}_summary.csv"))
            });
            let text = dataset_csv(&ds);
            write_file(&summary_path, &text)?;
            println!("images={}", files.len());
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(args: SynthArgs) -> CmdResult {
    if args.count == 0 {
        return Err(Failure::new(EXIT_USAGE, "--count must be at least 1"));
    }
    let labels_dir = args.out.join("labels");
    fs::create_dir_all(&labels_dir).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", labels_dir.display())))?;
    for index in args.start..args.start + args.count {
        let scene = synth_scene(args.seed, index, args.style, args.size, args.classes)?;
        let name = format!("{}_{index:05}", args.style);
        netpbm::write(args.out.join(format!("{name}.ppm")), &PnmImage::from_rgb(&scene.image)?)?;
        let labels = PnmImage::from_gray_bytes(scene.labels.width, scene.labels.height, scene.labels.data.clone());
        netpbm::write(labels_dir.join(format!("{name}.pgm")), &labels)?;
    }
    println!("scenes={} dir={}", args.count, args.out.display());
    Ok(())
}

fn selftest(args: SelftestArgs) -> CmdResult {
    let results = run_selftest(SelftestOptions { seed: args.seed, break_dct: args.break_dct })?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::new(EXIT_SELFTEST, format!("failed checks: {}", failed.join(", "))))
    }
}

fn eval_csv(report: &MiouReport) -> String {
    let mut out = String::from("class,iou\n");
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(out, "{c},{v}").unwrap(),
            None => writeln!(out, "{c},").unwrap(),
        }
    }
    writeln!(out, "mean,{}", report.miou).unwrap();
    out
}

fn frequency_weights_csv(net: &ToyNet, log: &TrainLog) -> Option<String> {
    let order = &net.assignment()?.order;
    let weights = match &log.frequency_weights {
        Some(w) => w.clone(),
        None => fixed_weights(net.variant().frequency_mode()?, order.len()).ok()?,
    };
    Some(weights_csv(order, &weights))
}

fn train_cmd(args: TrainArgs, threads: usize) -> CmdResult {
    let net_cfg = ToyNetConfig { input_size: args.net.size, classes: args.net.classes, variant: args.variant, ..ToyNetConfig::default() };
    let spec = args.data.unwrap_or(DataSpec { style: Style::Night, seed: args.seed, count: 200, start: 0 });
    let tc = args.optim.train_config(args.seed, threads);
    tc.validate()?;
    let mut net = ToyNet::new(net_cfg.clone(), args.seed)?;
    let data = synth_dataset(&spec, net_cfg.input_size, net_cfg.classes)?;

    let mut log = TrainLog::default();
    let outcome = train(&mut net, &data, &tc, &mut log);
    let meta = CheckpointMeta { net: net_cfg.clone(), seed: args.seed, train: Some(tc), data: Some(spec) };
    save_checkpoint(&args.out, &net, &meta)?;
    write_file(&args.out.join(LOG_FILE), &log.to_csv())?;
    if let Err(e) = outcome {
        let mut f = Failure::from(e);
        write!(f.message, "; checkpoint in {} holds the last good parameters", args.out.display()).unwrap();
        return Err(f);
    }
    if let Some(csv) = frequency_weights_csv(&net, &log) {
        write_file(&args.out.join(WEIGHTS_FILE), &csv)?;
    }

    let (label, eval_set) = if args.test_count == 0 {
        ("train".to_string(), data)
    } else {
        let held = spec.following(args.test_count);
        (held.to_string(), synth_dataset(&held, net_cfg.input_size, net_cfg.classes)?)
    };
    let report = evaluate_net(&net, &eval_set)?;
    write_file(&args.out.join(EVAL_FILE), &eval_csv(&report))?;
    println!("variant={} seed={} iterations={}", args.variant, args.seed, log.total_iters);
    if let Some(l) = log.final_loss() {
        println!("final_loss={l:?}");
    }
    println!("eval_data={label}");
    println!("miou={:?}", report.miou);
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> CmdResult {
    let (net, meta) = load_checkpoint(&args.ckpt)?;
    let spec = if args.data == "train" {
        meta.data.ok_or_else(|| Failure::new(EXIT_USAGE, "checkpoint records no training data; pass --data style:seed:count"))?
    } else {
        parse_data_spec(&args.data).map_err(|m| Failure::new(EXIT_USAGE, m))?
    };
    let data = synth_dataset(&spec, net.cfg.input_size, net.cfg.classes)?;
    let report = evaluate_net(&net, &data)?;
    let out = args.out.unwrap_or_else(|| args.ckpt.join(EVAL_FILE));
    write_file(&out, &eval_csv(&report))?;
    println!("variant={} data={spec}", net.variant());
    println!("miou={:?}", report.miou);
    Ok(())
}

fn ablate(args: AblateArgs, threads: usize) -> CmdResult {
    let net = ToyNetConfig { input_size: args.net.size, classes: args.net.classes, ..ToyNetConfig::default() };
    let cfg = AblationConfig {
        net,
        train: args.optim.train_config(0, threads),
        variants: args.variants,
        seeds: args.seeds.0,
        style: args.style,
        train_count: args.train_count,
        test_count: args.test_count,
    };
    cfg.train.validate()?;
    let report = ablation_run(&cfg, |row| println!("{},{},{}", row.variant, row.seed, row.miou))?;
    write_file(&args.out.join(ABLATION_FILE), &report.to_csv())?;
    write_file(&args.out.join(SUMMARY_FILE), &report.summary_csv())?;
    for s in report.summary() {
        println!("variant={} seeds={} mean_miou={:?} std_miou={:?}", s.variant, s.seeds, s.mean, s.std);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("1..5").unwrap(), Seeds(vec![1, 2, 3, 4, 5]));
        assert_eq!(parse_seeds("3,1").unwrap(), Seeds(vec![3, 1]));
        assert!(parse_seeds("5..1").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn error_codes() {
        assert_eq!(Failure::from(Error::InsufficientData { needed: 2, got: 0 }).code, EXIT_EMPTY);
        assert_eq!(Failure::from(Error::Diverged { iter: 3, last_good: "x".into() }).code, EXIT_DIVERGED);
        assert_eq!(Failure::from(Error::Config("x".into())).code, EXIT_USAGE);
    }
}
