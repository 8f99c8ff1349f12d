//! `afn`: synthesize datasets, train, run tiled inference, evaluate and self-verify.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afn_core::checkpoint::Checkpoint;
use afn_core::config::RunConfig;
use afn_core::dataset::{DatasetManifest, Split};
use afn_core::eval::{compare_methods, Method};
use afn_core::infer::{plan_tiles, predict_region, render_hillshade};
use afn_core::model::Variant;
use afn_core::raster::{load_aerial_png, load_dem, save_dem};
use afn_core::synth::gen_dataset;
use afn_core::train::{train, Trainer};
use afn_core::verify;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "afn", version, about = "DEM super-resolution with an attention-gated feedback network")]
struct Cli {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; module seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of HR/LR/ILR/aerial patches plus a manifest.
    Synth(SynthArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Super-resolve a DEM_ILR raster with a trained checkpoint.
    Infer(InferArgs),
    /// Compare bicubic and trained models on the test split.
    Eval(EvalArgs),
    /// Run the built-in correctness checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of patches (at least 3).
    #[arg(long)]
    n: Option<usize>,
    /// Patch edge length in HR pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Output directory (default: the data directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Continue from a checkpoint; epoch numbering carries on.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run directory for metrics.csv, checkpoints and config.json.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// DEM_ILR raster (.demf32).
    #[arg(long)]
    dem: PathBuf,
    /// Aerial PNG at twice the DEM resolution.
    #[arg(long)]
    aerial: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of each tile shared with its neighbour, in [0, 0.5).
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Also write a hillshade PNG next to the output.
    #[arg(long)]
    hillshade: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// manifest.json, or the directory holding it.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Trained models as NAME=CHECKPOINT (or just CHECKPOINT), comma separated.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// JSON report path; a text table is written next to it.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    no_baseline: bool,
    #[arg(long)]
    overlap: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    json: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: afn_core::Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<afn_core::Error> for Failure {
    fn from(e: afn_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    Ok(cfg)
}

fn resolve(cfg: RunConfig) -> Result<RunConfig, Failure> {
    cfg.resolve().map_err(usage)
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth(a) => {
            if let Some(n) = a.n {
                cfg.data.n = n;
            }
            if let Some(size) = a.size {
                cfg.data.synth.size = size;
            }
            if cfg.data.n < 3 {
                return Err(usage(format!("--n must be at least 3, got {}", cfg.data.n)));
            }
            let mut cfg = resolve(cfg)?;
            let out = a.out.unwrap_or_else(|| cfg.data.resolved_dir());
            let manifest = gen_dataset(cfg.data.n, &cfg.data.synth, &out)?;
            // the dataset directory is the config's own location
            cfg.data.dir = Some(PathBuf::from("."));
            cfg.save_resolved(&out)?;
            let c = manifest.counts;
            println!(
                "wrote {} patches to {} (train {}, val {}, test {})",
                manifest.entries.len(),
                out.display(),
                c.train,
                c.val,
                c.test
            );
        }
        Command::Train(a) => {
            if let Some(v) = a.variant {
                cfg.model.variant = v;
            }
            if let Some(d) = a.data {
                cfg.data.dir = Some(d);
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            let cfg = resolve(cfg)?;
            let manifest_path = cfg.data.manifest_path();
            let manifest = DatasetManifest::load(&manifest_path)?;
            let trainer = match &a.resume {
                Some(p) => {
                    let ckpt = Checkpoint::load(p)?;
                    if a.variant.is_some_and(|v| v != ckpt.model.config().variant) {
                        return Err(usage(format!(
                            "--variant {} does not match the checkpoint's {}",
                            cfg.model.variant,
                            ckpt.model.config().variant
                        )));
                    }
                    Trainer::resume(ckpt, cfg.train.clone())?
                }
                None => Trainer::new(&cfg.model, cfg.train.clone())?,
            };
            let mut echoed = cfg.clone();
            echoed.model = trainer.model.config().clone();
            echoed.save_resolved(&a.out)?;
            let start = trainer.epoch;
            let outcome = train(&manifest, trainer, Some(&a.out))?;
            for row in &outcome.log {
                println!("{}", row.csv_line());
            }
            println!(
                "trained {} epochs ({} to {}); checkpoints in {}",
                outcome.trainer.epoch - start,
                start,
                outcome.trainer.epoch,
                a.out.display()
            );
        }
        Command::Infer(a) => {
            if let Some(o) = a.overlap {
                cfg.infer.overlap = o;
            }
            if let Some(p) = a.patch_size {
                cfg.infer.patch_size = p;
            }
            cfg.infer.hillshade |= a.hillshade;
            let cfg = resolve(cfg)?;
            let model = Checkpoint::load(&a.checkpoint)?.model;
            let dem = load_dem(&a.dem)?;
            let aerial = load_aerial_png(&a.aerial)?;
            let size = cfg.infer.patch_size.min(dem.rows()).min(dem.cols());
            let plan = plan_tiles(dem.rows(), dem.cols(), size, cfg.infer.overlap)?;
            let sr = predict_region(&model, &dem, &aerial, &plan, cfg.infer.norm_scale)?;
            save_dem(&sr, &a.out)?;
            if cfg.infer.hillshade {
                render_hillshade(&sr, a.out.with_extension("png"))?;
            }
            let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            cfg.save_resolved(dir)?;
            println!(
                "wrote {}x{} raster to {} from {} tiles",
                sr.rows(),
                sr.cols(),
                a.out.display(),
                plan.len()
            );
        }
        Command::Eval(a) => {
            if a.no_baseline {
                cfg.eval.baseline = false;
            }
            if let Some(o) = a.overlap {
                cfg.infer.overlap = o;
            }
            let cfg = resolve(cfg)?;
            let manifest_path = match a.manifest {
                Some(p) if p.is_dir() => p.join("manifest.json"),
                Some(p) => p,
                None => cfg.data.manifest_path(),
            };
            let manifest = DatasetManifest::load(&manifest_path)?;
            let mut methods = Vec::new();
            if cfg.eval.baseline {
                methods.push(Method::Bicubic);
            }
            for spec in &a.methods {
                let (name, path) = match spec.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => {
                        let ckpt = Checkpoint::load(spec)?;
                        let name = ckpt.model.config().variant.to_string();
                        methods.push(Method::Model {
                            name,
                            model: Box::new(ckpt.model),
                        });
                        continue;
                    }
                };
                let model = Checkpoint::load(&path)?.model;
                methods.push(Method::Model {
                    name,
                    model: Box::new(model),
                });
            }
            if methods.is_empty() {
                return Err(usage("nothing to evaluate: pass --methods or drop --no-baseline"));
            }
            let regions = manifest.load_split(Split::Test, cfg.infer.norm_scale)?;
            let report = compare_methods(&regions, &methods, cfg.infer.patch_size, cfg.infer.overlap, &cfg.eval)?;
            let text = report.to_text();
            print!("{text}");
            if let Some(path) = &a.report {
                let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
                std::fs::create_dir_all(dir).map_err(|e| afn_core::Error::io(dir, e))?;
                std::fs::write(path, report.to_json()?).map_err(|e| afn_core::Error::io(path, e))?;
                let txt = path.with_extension("txt");
                std::fs::write(&txt, &text).map_err(|e| afn_core::Error::io(&txt, e))?;
                cfg.save_resolved(dir)?;
            }
        }
        Command::Verify(a) => {
            let seed = cfg.seed.unwrap_or(0);
            let report = verify::run_all(seed);
            if a.json {
                print!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_text());
            }
            let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("failed checks: {}", failed.join(", "));
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
