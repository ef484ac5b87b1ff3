//! Command-line driver for the `swat-core` library: complexity accounting,
//! verification suites, sweeps, training and permutation/attention probes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use swat_core::complexity::{self, SweepAxis};
use swat_core::train;
use swat_core::verify::{self, CheckReport, GradCheckConfig};
use swat_core::{GradFault, InitPolicy, InitScheme, Model, OpKind, Tensor, Variant};

pub mod config;
pub mod pnm;
pub mod report;

use config::ConfigFile;

#[derive(Debug, Parser)]
#[command(name = "swat", version, about = "Structure-aware tokenization and mixing toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer parameter and FLOP counts.
    Count(CountArgs),
    /// Run verification suites; exits 1 if any check fails.
    Check(CheckArgs),
    /// Complexity over a range of alpha, kernel or flag values.
    Sweep(SweepArgs),
    /// Train on the synthetic sub-patch orientation dataset.
    Train(TrainArgs),
    /// Token permutation probe and attention map dump.
    Probe(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct ModelSource {
    /// JSON config file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named preset, e.g. deit-ti or tiny-mixer-swat.
    #[arg(long)]
    pub preset: Option<String>,
}

impl ModelSource {
    fn load(&self) -> anyhow::Result<ConfigFile> {
        match (&self.config, &self.preset) {
            (Some(path), _) => ConfigFile::load(path),
            (None, Some(name)) => ConfigFile::from_preset(name),
            (None, None) => bail!("pass --config FILE or --preset NAME"),
        }
    }
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Seed; falls back to $SWAT_SEED, then the config's seed, then 0.
    #[arg(long, env = "SWAT_SEED")]
    pub seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self, cfg: Option<&ConfigFile>) -> u64 {
        self.seed.or(cfg.and_then(|c| c.seed)).unwrap_or(0)
    }
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Square input side; defaults to the configured image size.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Grads,
    Equiv,
    Structure,
    Perm,
    All,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Random trials per equivalence/structure check (at least 20).
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Write the reports here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Negative control: scale one operation's backward rule, as OP:FACTOR
    /// (e.g. gelu:1.5).
    #[arg(long, value_parser = parse_fault)]
    pub inject_grad_fault: Option<GradFault>,
}

fn parse_fault(s: &str) -> Result<GradFault, String> {
    let (op, factor) = s.split_once(':').unwrap_or((s, "2"));
    let op = OpKind::from_name(op).ok_or_else(|| {
        let names: Vec<&str> = OpKind::ALL.iter().map(OpKind::name).collect();
        format!("unknown op {op:?}; expected one of {}", names.join(", "))
    })?;
    let factor: f64 = factor.parse().map_err(|e| format!("bad factor {factor:?}: {e}"))?;
    Ok(GradFault { op, factor })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Alpha,
    Kernel,
    Flags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<usize>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Overrides the optimizer's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out_history: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[command(flatten)]
    pub seed: SeedArg,
    /// PGM/PPM file, or `synthetic` for seeded uniform noise.
    #[arg(long, default_value = "synthetic")]
    pub image: String,
    #[arg(long, default_value_t = 10)]
    pub perms: usize,
    /// Block whose attention map is written (transformer variants only;
    /// defaults to the final block).
    #[arg(long)]
    pub attn_layer: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Command failure classes, mapped onto exit codes 1 and 2.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0} check(s) failed")]
    Checks(usize),
    #[error("training failed: {0}")]
    Training(swat_core::Error),
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Count(a) => cmd_count(&a),
        Command::Check(a) => cmd_check(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Probe(a) => cmd_probe(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Failure>() {
                Some(_) => ExitCode::from(1),
                None => ExitCode::from(2),
            }
        }
    }
}

fn human(n: u64) -> String {
    match n {
        n if n >= 1_000_000_000 => format!("{:.2}G", n as f64 / 1e9),
        n if n >= 1_000_000 => format!("{:.2}M", n as f64 / 1e6),
        n if n >= 1_000 => format!("{:.2}K", n as f64 / 1e3),
        n => n.to_string(),
    }
}

pub fn cmd_count(a: &CountArgs) -> anyhow::Result<()> {
    let cfg = a.source.load()?;
    let model = Model::uninitialized(&cfg.model)?;
    let size = a.input_size.unwrap_or(cfg.model.image_size);
    let r = complexity::count_flops(&model, size)?;
    println!("{:<52} {:>12} {:>14}", "layer", "params", "flops");
    for row in &r.rows {
        println!("{:<52} {:>12} {:>14}", row.path, row.params, row.flops);
    }
    println!("total params: {} ({})", r.total_params(), human(r.total_params()));
    println!("total flops: {} ({}) at {size}x{size}, {}", r.total_flops(), human(r.total_flops()), r.counting_convention);
    if let Some(path) = &a.csv {
        report::write_csv_file(path, report::layer_rows(&r))?;
    }
    Ok(())
}

pub fn run_suite(suite: Suite, seed: u64, trials: usize, fault: Option<GradFault>) -> Vec<CheckReport> {
    let grad_cfg = GradCheckConfig { fault, ..GradCheckConfig::default() };
    let mut out = Vec::new();
    if matches!(suite, Suite::Grads | Suite::All) {
        out.extend(verify::gradient_suite(seed, &grad_cfg));
    }
    if matches!(suite, Suite::Equiv | Suite::All) {
        out.extend(verify::equivalence_suite(seed, trials));
    }
    if matches!(suite, Suite::Structure | Suite::All) {
        out.extend(verify::structure_suite(seed, trials));
    }
    if matches!(suite, Suite::Perm | Suite::All) {
        out.extend(verify::permutation_suite(seed));
    }
    out
}

fn finish_checks(reports: &[CheckReport]) -> anyhow::Result<()> {
    let failed = reports.iter().filter(|r| !r.passed()).count();
    eprintln!("{} of {} checks passed", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(Failure::Checks(failed).into());
    }
    Ok(())
}

pub fn cmd_check(a: &CheckArgs) -> anyhow::Result<()> {
    if a.trials < verify::MIN_TRIALS {
        bail!("--trials must be at least {}", verify::MIN_TRIALS);
    }
    let seed = a.seed.resolve(None);
    let reports = run_suite(a.suite, seed, a.trials, a.inject_grad_fault);
    let rows = reports.iter().map(report::CheckRow::from);
    match &a.csv {
        Some(path) => report::write_csv_file(path, rows)?,
        None => report::write_csv(std::io::stdout().lock(), rows)?,
    }
    finish_checks(&reports)
}

pub fn cmd_sweep(a: &SweepArgs) -> anyhow::Result<()> {
    let cfg = a.source.load()?;
    let (axis, name) = match a.axis {
        Axis::Alpha => (SweepAxis::Alpha, "alpha"),
        Axis::Kernel => (SweepAxis::Kernel, "kernel"),
        Axis::Flags => (SweepAxis::Flags, "flags"),
    };
    let points = complexity::sweep(&cfg.model, axis, &a.values);
    let rows: Vec<report::SweepRow<'_>> = points
        .iter()
        .map(|p| match &p.report {
            Ok(r) => report::SweepRow {
                axis: name,
                value: p.value,
                params: Some(r.total_params()),
                flops: Some(r.total_flops()),
                error: String::new(),
            },
            Err(e) => report::SweepRow { axis: name, value: p.value, params: None, flops: None, error: e.to_string() },
        })
        .collect();
    for r in &rows {
        match (r.params, r.flops) {
            (Some(p), Some(f)) => println!("{name}={:<4} params {:>12} ({})  flops {:>14} ({})", r.value, p, human(p), f, human(f)),
            _ => println!("{name}={:<4} error: {}", r.value, r.error),
        }
    }
    match &a.csv {
        Some(path) => report::write_csv_file(path, rows),
        None => Ok(()),
    }
}

fn init_policy(cfg: &ConfigFile, seed: u64, default: InitScheme) -> InitPolicy {
    InitPolicy { scheme: cfg.init.unwrap_or(default), seed }
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = a.source.load()?;
    let seed = a.seed.resolve(Some(&cfg));
    let mut spec = cfg.dataset.clone();
    spec.seed = seed;
    let data = train::make_synthetic_dataset(&spec)?;
    let mut opt = cfg.optimizer.clone();
    opt.seed = seed;
    if let Some(e) = a.epochs {
        opt.epochs = e;
    }
    let mut model = Model::build(&cfg.model, &init_policy(&cfg, seed, InitScheme::default()))?;
    let out = train::train(&mut model, &data, &opt).map_err(Failure::Training)?;
    report::write_csv_file(&a.out_history, out.history.iter().map(report::HistoryRow::from))?;
    if let Some(last) = out.history.last() {
        println!(
            "epochs {}  final loss {:.6}  final acc {:.4}  best epoch {}  best loss {:.6}",
            out.history.len(),
            last.loss,
            last.train_acc,
            out.best_epoch,
            last.best_loss
        );
    }
    Ok(())
}

fn probe_image(arg: &str, size: usize, patch: usize, seed: u64) -> anyhow::Result<Tensor> {
    if arg == "synthetic" {
        let pixels: Vec<f64> = {
            let mut rng = swat_core::rng::derived(seed, 0x1a6e);
            (0..3 * size * size).map(|_| swat_core::rng::uniform(&mut rng, 0.0, 1.0)).collect()
        };
        return Ok(Tensor::new(&[1, 3, size, size], pixels)?);
    }
    let img = pnm::read(Path::new(arg))?;
    if img.width % patch != 0 || img.height % patch != 0 {
        bail!("image is {}x{}, not divisible by patch size {patch} (resampling is not supported)", img.width, img.height);
    }
    if img.width != size || img.height != size {
        bail!("image is {}x{}, model expects {size}x{size}", img.width, img.height);
    }
    Ok(Tensor::new(&[1, 3, size, size], img.to_chw())?)
}

pub fn cmd_probe(a: &ProbeArgs) -> anyhow::Result<()> {
    let cfg = a.source.load()?;
    let seed = a.seed.resolve(Some(&cfg));
    if a.perms == 0 {
        bail!("--perms must be positive");
    }
    if a.attn_layer.is_some() && cfg.model.variant != Variant::Transformer {
        bail!("--attn-layer needs a transformer model; this config is a mixer");
    }
    let image = probe_image(&a.image, cfg.model.image_size, cfg.model.patch, seed)?;
    let model = Model::build(&cfg.model, &init_policy(&cfg, seed, InitScheme::FanIn))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    // transformers always get a map, of the final block unless told otherwise
    let layer = match cfg.model.variant {
        Variant::Transformer => Some(a.attn_layer.unwrap_or(cfg.model.depth - 1)),
        Variant::Mixer => None,
    };
    if let Some(layer) = layer {
        let map = verify::attention_map(&model, &image, layer)?;
        let (h, w) = (map.shape()[0], map.shape()[1]);
        pnm::write_pgm(&a.out.join("attention.pgm"), w, h, &pnm::quantize(map.data()))?;
    }
    let r = verify::permutation_probe(&model, &image, a.perms, seed);
    report::write_csv_file(&a.out.join("permutation.csv"), [report::CheckRow::from(&r)])?;
    println!("{}: max logit deviation {:e} ({} {:e}) -> {}", r.name, r.worst_case, match r.bound {
        verify::Bound::AtMost => "must be <=",
        verify::Bound::Above => "must be >",
    }, r.tolerance, r.status.as_str());
    finish_checks(std::slice::from_ref(&r))
}
