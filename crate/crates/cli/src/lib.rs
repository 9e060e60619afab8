//! `cogcap` command line: dataset generation, the two training stages,
//! evaluation, attribution, report rendering and the hyperparameter sweep.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cogcap_core::checkpoint::{self, read_manifest};
use cogcap_core::contrastive::log_to_jsonl;
use cogcap_core::data::generate_dataset;
use cogcap_core::pipeline::{self, Estimate};
use cogcap_core::{EvalReport, Modality, RunConfig, SynthDataset};

#[derive(Debug, Parser)]
#[command(name = "cogcap", version, about = "Multimodal EEG decoding at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the three EEG-modality experts.
    TrainAlign(TrainArgs),
    /// Train one diffusion prior per expert.
    TrainPrior(TrainArgs),
    /// Evaluate trained checkpoints and write a JSON report.
    Eval {
        #[command(flatten)]
        io: CkptArgs,
        #[arg(long)]
        out: PathBuf,
        /// DDIM sampling steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Classifier-free guidance scale.
        #[arg(long)]
        guidance: Option<f64>,
        /// Sampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Grad-CAM channel and time saliency per modality.
    Attribute {
        #[command(flatten)]
        io: CkptArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a JSON report as tables.
    Report {
        #[arg(long)]
        input: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Batch-size × learning-rate grid for one expert.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![32usize, 64, 128])]
        batch_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1e-4, 3e-4, 1e-3])]
        lrs: Vec<f64>,
        #[arg(long, default_value = "image")]
        modality: Modality,
        /// Overrides the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config; defaults to the dataset's data section (alignment) or the
    /// stored alignment config (prior).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Debug, Args)]
struct CkptArgs {
    /// Run config; defaults to the one stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
}

/// Runs the command line and returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

/// Worker threads: `COGCAP_THREADS` if set, else the machine's parallelism.
pub fn threads() -> Result<usize> {
    match std::env::var("COGCAP_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("COGCAP_THREADS={v:?} is not a count"))?;
            if n == 0 {
                bail!("COGCAP_THREADS must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<SynthDataset> {
    SynthDataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `--config` if given, else the config stored under `ckpt/kind`.
fn resolve_config(explicit: Option<&Path>, ckpt: &Path, kind: &str) -> Result<RunConfig> {
    match explicit {
        Some(p) => load_config(p),
        None => Ok(read_manifest(ckpt, kind)?.config),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => {
            let cfg = config.as_deref().map(load_config).transpose()?.unwrap_or_default();
            let ds = generate_dataset(&cfg.data)?;
            ds.save(&out)?;
            eprintln!("wrote {} train and {} test trials to {}", ds.train_trials.len(), ds.test_trials.len(), out.display());
        }
        Command::TrainAlign(a) => {
            let ds = load_dataset(&a.dataset)?;
            let cfg = match &a.config {
                Some(p) => load_config(p)?,
                None => RunConfig {
                    data: ds.generation_config.clone(),
                    ..RunConfig::default()
                },
            };
            let data = pipeline::prepare_data(&ds, &cfg)?;
            let (ck, log) = pipeline::run_alignment(&data, &cfg, threads()?.min(Modality::ALL.len()))?;
            checkpoint::save_alignment(&a.ckpt, &cfg, &ck)?;
            write_text(&checkpoint::align_dir(&a.ckpt).join("log.jsonl"), &log_to_jsonl(&log))?;
            for e in log.iter().filter(|r| r.epoch + 1 == cfg.align.epochs) {
                eprintln!("{}: top1 {:.4} top5 {:.4} tau {:.4}", e.modality, e.test_top1, e.test_top5, e.tau);
            }
        }
        Command::TrainPrior(a) => {
            let cfg = resolve_config(a.config.as_deref(), &a.ckpt, "align")?;
            let ds = load_dataset(&a.dataset)?;
            let align = checkpoint::load_alignment(&a.ckpt, &cfg)?;
            let data = pipeline::prepare_data(&ds, &cfg)?;
            let (ck, log) = pipeline::run_priors(&data, &align, &cfg, threads()?.min(Modality::ALL.len()))?;
            checkpoint::save_priors(&a.ckpt, &cfg, &ck)?;
            let lines: String = log.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
            write_text(&checkpoint::prior_dir(&a.ckpt).join("log.jsonl"), &lines)?;
        }
        Command::Eval {
            io,
            out,
            steps,
            guidance,
            seed,
        } => {
            let mut cfg = resolve_config(io.config.as_deref(), &io.ckpt, "prior")?;
            let align = checkpoint::load_alignment(&io.ckpt, &cfg)?;
            let priors = checkpoint::load_priors(&io.ckpt, &cfg)?;
            if let Some(s) = steps {
                cfg.prior.sample_steps = s;
            }
            if let Some(g) = guidance {
                cfg.prior.guidance_scale = g;
            }
            if let Some(s) = seed {
                cfg.eval.sample_seed = s;
            }
            cfg.validate()?;
            let ds = load_dataset(&io.dataset)?;
            let report = pipeline::evaluate_pipeline(&ds, &align, &priors, &cfg)?;
            write_text(&out, &report.to_json())?;
        }
        Command::Attribute { io, out } => {
            let cfg = resolve_config(io.config.as_deref(), &io.ckpt, "align")?;
            let align = checkpoint::load_alignment(&io.ckpt, &cfg)?;
            let data = pipeline::prepare_data(&load_dataset(&io.dataset)?, &cfg)?;
            let maps = pipeline::attribute(&align.experts, &data)?;
            write_text(&out, &(serde_json::to_string_pretty(&maps)? + "\n"))?;
        }
        Command::Report { input, out } => {
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let report: EvalReport = serde_json::from_str(&text).context("parsing report")?;
            let table = render_report(&report);
            match out {
                Some(p) => write_text(&p, &table)?,
                None => print!("{table}"),
            }
        }
        Command::Sweep {
            config,
            dataset,
            out,
            batch_sizes,
            lrs,
            modality,
            epochs,
        } => {
            let ds = load_dataset(&dataset)?;
            let mut cfg = match &config {
                Some(p) => load_config(p)?,
                None => RunConfig {
                    data: ds.generation_config.clone(),
                    ..RunConfig::default()
                },
            };
            if let Some(e) = epochs {
                cfg.align.epochs = e;
            }
            cfg.validate()?;
            let data = pipeline::prepare_data(&ds, &cfg)?;
            let points = pipeline::sweep(&data, &cfg, modality, &batch_sizes, &lrs, threads()?)?;
            write_text(&out, &(serde_json::to_string_pretty(&points)? + "\n"))?;
        }
    }
    Ok(())
}

fn est(e: &Estimate) -> String {
    format!("{:.4} [{:.4}, {:.4}]", e.value, e.ci_low, e.ci_high)
}

/// Two tables in the layout of the retrieval and reconstruction results:
/// one row per modality, every report field labelled once.
pub fn render_report(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config_hash {}", r.config_hash);
    let _ = writeln!(s, "seed {}  data_seed {}", r.seed, r.data_seed);
    let _ = writeln!(s, "n_queries {}  n_candidates {}  ci_level {}", r.n_queries, r.n_candidates, r.ci_level);
    let _ = writeln!(s);
    let _ = writeln!(s, "{}-way zero-shot retrieval", r.n_candidates);
    let line = |a: &str, b: &str, c: &str| format!("{a:<18} {b:<26} {c}");
    let _ = writeln!(s, "{}", line("modality", "top1", "top5"));
    for m in &r.retrieval {
        let _ = writeln!(s, "{}", line(m.modality.name(), &est(&m.top1), &est(&m.top5)));
    }
    let u = &r.union_upper_bound;
    let _ = writeln!(s, "{}", line("union_upper_bound", &est(&u.top1), &est(&u.top5)));
    let _ = writeln!(s);
    let _ = writeln!(s, "Reconstruction proxy");
    let extractors: Vec<String> = r
        .reconstruction
        .first()
        .map(|m| m.two_way.iter().map(|f| format!("two_way[{}]", f.extractor.name())).collect())
        .unwrap_or_default();
    let mut header = vec![
        "modality".to_string(),
        "direct_cosine".into(),
        "prior_cosine".into(),
        "pixcorr".into(),
        "ssim".into(),
    ];
    header.extend(extractors);
    header.push("two_way_combined".into());
    header.push("correlation_distance".into());
    let row = |cells: &[String]| -> String {
        let mut line = format!("{:<10}", cells[0]);
        for c in &cells[1..] {
            let _ = write!(line, " {c:<26}");
        }
        line.trim_end().to_string()
    };
    let _ = writeln!(s, "{}", row(&header));
    for m in &r.reconstruction {
        let mut cells = vec![
            m.modality.name().to_string(),
            est(&m.direct_cosine),
            est(&m.prior_cosine),
            est(&m.pixcorr),
            est(&m.ssim),
        ];
        cells.extend(m.two_way.iter().map(|f| est(&f.two_way)));
        cells.push(est(&m.two_way_combined));
        cells.push(est(&m.correlation_distance));
        let _ = writeln!(s, "{}", row(&cells));
    }
    s
}
