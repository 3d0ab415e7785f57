use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use sot_core::config::RunConfig;
use sot_core::dataio::{load_sequences, resolve_sequence};
use sot_core::evalkit::{aggregate, ope_metrics, CategoryResult};
use sot_core::model::Model;
use sot_core::selfcheck::{self, Check};
use sot_core::tracker::{format_boxes, format_track, parse_track, track_sequence};
use sot_core::train::train;
use sot_core::CoreError;
use sot_tensor::{checkpoint, ParamStore};

#[derive(Parser)]
#[command(name = "sot", version, about = "Point-cloud single object tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Desk,
    Overfit,
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured sequences and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides `train.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Track one sequence from its first ground-truth box.
    Track {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene id under the dataset root, or `synthetic`.
        #[arg(long)]
        sequence: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the ground-truth boxes in track format.
        #[arg(long)]
        gt_out: Option<PathBuf>,
    },
    /// Success and precision of predicted tracks against ground truth.
    /// Repeat `--pred`/`--gt` pairs to aggregate several sequences.
    Eval {
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        /// One category name per pair; defaults to the ground-truth file stem.
        #[arg(long)]
        name: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every layer, module and loss,
    /// then of the whole network.
    Gradcheck {
        /// Network for the end-to-end check; the built-in toy network when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compare the geometric kernels against brute-force references.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Trainable parameter count per module.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print a complete configuration file.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) | CoreError::InvalidInput(_) | CoreError::Parse { .. } | CoreError::Binary { .. } => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<sot_tensor::TensorError> for Failure {
    fn from(e: sot_tensor::TensorError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path, cfg: &RunConfig, model: &Model) -> Result<ParamStore, Failure> {
    let (store, hash) = checkpoint::load(path)?;
    if hash != cfg.architecture_hash() {
        return Err(Failure::Usage(format!(
            "{}: checkpoint architecture {hash:016x} does not match the configuration ({:016x})",
            path.display(),
            cfg.architecture_hash()
        )));
    }
    let expected = model.init(0)?;
    if !expected.keys().eq(store.keys()) {
        return Err(Failure::Usage(format!("{}: parameter set differs from the model", path.display())));
    }
    Ok(store)
}

fn report(checks: &[Check]) -> Outcome {
    for c in checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} checks failed", checks.len())));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_train(config: &Path, epochs: Option<usize>, seed: Option<u64>, steps: Option<usize>, ckpt: Option<PathBuf>) -> Outcome {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.max_steps = s;
    }
    let out = ckpt
        .or_else(|| cfg.train.checkpoint.clone())
        .ok_or_else(|| Failure::Usage("no checkpoint path: pass --checkpoint or set train.checkpoint".into()))?;
    cfg.validate()?;
    let sequences = load_sequences(&cfg.data)?;
    let model = Model::new(&cfg)?;
    let mut store = model.init(cfg.seed)?;
    let started = Instant::now();
    let summary = train(&model, &mut store, &cfg, &sequences, |r| {
        println!("{r} t={:.1}s", started.elapsed().as_secs_f64());
    })?;
    if summary.skipped > 0 {
        println!("skipped {} frame pairs with empty search regions", summary.skipped);
    }
    checkpoint::save(&out, &store, cfg.architecture_hash())?;
    println!("checkpoint {}", out.display());
    Ok(())
}

fn cmd_track(config: &Path, ckpt: &Path, sequence: &str, out: &Path, gt_out: Option<&Path>) -> Outcome {
    let cfg = load_config(config)?;
    let model = Model::new(&cfg)?;
    let store = load_checkpoint(ckpt, &cfg, &model)?;
    let seq = resolve_sequence(&cfg.data, sequence)?;
    let frames = track_sequence(&model, &store, &cfg, &seq.frames, seq.boxes[0])?;
    write(out, &format_track(&frames))?;
    if let Some(p) = gt_out {
        write(p, &format_boxes(&seq.boxes))?;
    }
    let pred: Vec<_> = frames.iter().map(|f| f.bbox).collect();
    let (s, p) = ope_metrics(&pred, &seq.boxes)?;
    let lost = frames.iter().filter(|f| f.lost).count();
    println!("{} frames={} lost={lost} success={s:.2} precision={p:.2}", seq.id, frames.len());
    Ok(())
}

fn read_track(path: &Path) -> Result<Vec<(usize, sot_core::geometry::Box3D)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(parse_track(&text, path)?)
}

fn cmd_eval(pred: &[PathBuf], gt: &[PathBuf], names: &[String], out: &Path) -> Outcome {
    if pred.len() != gt.len() {
        return Err(Failure::Usage(format!("{} --pred files but {} --gt files", pred.len(), gt.len())));
    }
    if !names.is_empty() && names.len() != gt.len() {
        return Err(Failure::Usage(format!("{} --name values for {} pairs", names.len(), gt.len())));
    }
    let mut categories = Vec::new();
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        let (pb, gb) = (read_track(p)?, read_track(g)?);
        let pf: Vec<usize> = pb.iter().map(|e| e.0).collect();
        let gf: Vec<usize> = gb.iter().map(|e| e.0).collect();
        if pf != gf {
            return Err(Failure::Usage(format!("{} and {} cover different frames", p.display(), g.display())));
        }
        let boxes = |v: &[(usize, sot_core::geometry::Box3D)]| v.iter().map(|e| e.1).collect::<Vec<_>>();
        let (success, precision) = ope_metrics(&boxes(&pb), &boxes(&gb))?;
        let name = names.get(i).cloned().unwrap_or_else(|| {
            g.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("sequence{i}"))
        });
        categories.push(CategoryResult {
            name,
            frames: gb.len(),
            success,
            precision,
        });
    }
    let text = aggregate(&categories)?.render();
    write(out, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, seed: u64) -> Outcome {
    let started = Instant::now();
    let mut checks = selfcheck::local_suite(seed)?;
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::toy(),
    };
    let sample = (cfg.model.points > 64).then_some(4);
    checks.push(selfcheck::end_to_end(&cfg, sample, seed)?);
    report(&checks)?;
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_params(config: Option<&Path>) -> Outcome {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let store = Model::new(&cfg)?.init(cfg.seed)?;
    println!("{}", Model::parameter_breakdown(&store));
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Train {
            config,
            epochs,
            seed,
            steps,
            checkpoint,
        } => cmd_train(&config, epochs, seed, steps, checkpoint),
        Command::Track {
            config,
            checkpoint,
            sequence,
            out,
            gt_out,
        } => cmd_track(&config, &checkpoint, &sequence, &out, gt_out.as_deref()),
        Command::Eval { pred, gt, name, out } => cmd_eval(&pred, &gt, &name, &out),
        Command::Gradcheck { config, seed } => cmd_gradcheck(config.as_deref(), seed),
        Command::Selftest { seed } => report(&selfcheck::oracle_suite(seed)?),
        Command::Params { config } => cmd_params(config.as_deref()),
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Default => RunConfig::default(),
                Preset::Desk => RunConfig::desk(),
                Preset::Overfit => RunConfig::overfit(),
                Preset::Toy => RunConfig::toy(),
            };
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
    }
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
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
