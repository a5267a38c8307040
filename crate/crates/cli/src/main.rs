//! `lmd`: pre-train the latent projector, train the masked latent model under
//! a mask-ratio schedule, fine-tune, reconstruct, and report run metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmd_core::checkpoint::{Checkpoint, Stage};
use lmd_core::config::{RunConfig, RunManifest};
use lmd_core::data::{load_dataset, load_image, save_png, ImageDataset};
use lmd_core::gradsuite::{run_suite, SuiteOptions};
use lmd_core::metrics::MetricsLog;
use lmd_core::report::{curves_svg, summary_csv, SUMMARY_HEADER};
use lmd_core::schedule::{curve_csv, ScheduleConfig, Scheme};
use lmd_core::trainer::{
    finetune_classifier, load_mae, load_projector, pretrain_lsp, reconstruct, train_lmd, RunOptions,
};
use lmd_core::{synth, LmdError, Tensor};
use log::{info, warn};

const LOG_FILE: &str = "log.csv";

#[derive(Parser)]
#[command(name = "lmd", version, about = "Latent masking diffusion pre-training toolkit")]
struct Cli {
    /// Log progress every N steps (0 silences progress lines).
    #[arg(long, global = true, default_value_t = 100)]
    progress_every: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to `runs/<command>-<config hash>-s<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the VQ latent space projector.
    PretrainLsp {
        #[command(flatten)]
        run: RunArgs,
        /// Flat directory of PNG/JPEG images.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the masked latent model on a frozen projector.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Projector checkpoint from `pretrain-lsp`.
        #[arg(long)]
        lsp: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// uniform, piecewise, cosine or fixed:R; overrides `schedule.scheme`.
        #[arg(long)]
        scheduler: Option<Scheme>,
    },
    /// Fine-tune the pre-trained encoder with a linear classification head.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Projector checkpoint used to encode the images.
        #[arg(long)]
        lsp: PathBuf,
        /// Masked-model checkpoint to start from; random init when absent.
        #[arg(long)]
        lsmd: Option<PathBuf>,
        /// Directory-per-class image tree.
        #[arg(long)]
        data: PathBuf,
    },
    /// Mask, reconstruct and decode one image.
    Reconstruct {
        #[arg(long)]
        lsp: PathBuf,
        #[arg(long)]
        lsmd: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize runs.
    ///
    /// Writes `summary.csv` with columns
    /// run,iterations,events,mit_s,mlt_s,mli,mat1_s,mat5_s,final_smoothed_loss
    /// ("undefined" where a metric has no value) and `curves.svg` with the
    /// smoothed loss and mask ratio of every run. Each run directory holds a
    /// `log.csv` with columns step,wall_time_s,loss,top1,top5,ratio.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print or write the mask ratio at every step of a schedule.
    Schedule {
        #[arg(long)]
        scheme: Scheme,
        #[arg(long)]
        steps: u64,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Also write the reports as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write a synthetic image corpus of simple patterns.
    MakeCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: u32,
        /// Write `class_NN/` subdirectories.
        #[arg(long)]
        labeled: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit code 2 failures.
enum Failure {
    Lmd(LmdError),
    Other(String),
}

impl From<LmdError> for Failure {
    fn from(e: LmdError) -> Self {
        Failure::Lmd(e)
    }
}

impl Failure {
    fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Lmd(e) => (e.kind(), e.to_string()),
            Failure::Other(m) => ("runtime", m.clone()),
        };
        format!("lmd: error[{kind}]: {}", msg.replace('\n', " "))
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid usage")
                .trim_start_matches("error: ");
            eprintln!("lmd: error[usage]: {first}");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let progress = cli.progress_every;
    match cli.command {
        Command::PretrainLsp { run, data } => pretrain(run, &data, progress),
        Command::Train {
            run,
            lsp,
            data,
            scheduler,
        } => train(run, &lsp, &data, scheduler, progress),
        Command::Finetune { run, lsp, lsmd, data } => finetune(run, &lsp, lsmd.as_deref(), &data, progress),
        Command::Reconstruct {
            lsp,
            lsmd,
            input,
            ratio,
            seed,
            out,
        } => {
            let proj = load_projector(&load_stage(&lsp, Stage::Lsp)?)?;
            let ck = Checkpoint::load(&lsmd)?;
            let mae = load_mae(&ck)?;
            let cfg = embedded_config(&ck, &lsmd)?;
            let [h, w] = cfg.data.image_size;
            let image = resize_to(&load_image(&input)?, h, w, &input)?;
            let rec = reconstruct(&image, &proj, &mae, ratio, seed)?;
            save_png(&rec, &out)?;
            info!("wrote {}", out.display());
            Ok(())
        }
        Command::Report { runs, out } => report(&runs, &out),
        Command::Schedule { scheme, steps, out } => {
            let sched = ScheduleConfig::new(scheme, steps);
            sched.validate()?;
            let csv = curve_csv(&sched.curve());
            match out {
                Some(path) => write_file(&path, &csv),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
        Command::Gradcheck { json } => gradcheck(json.as_deref()),
        Command::MakeCorpus {
            out,
            count,
            size,
            labeled,
            seed,
        } => {
            synth::write_corpus(&out, count, size, labeled, seed)?;
            info!("wrote {count} images to {}", out.display());
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn load_stage(path: &Path, stage: Stage) -> Result<Checkpoint, Failure> {
    let ck = Checkpoint::load(path)?;
    ck.expect_stage(stage, path)?;
    Ok(ck)
}

fn embedded_config(ck: &Checkpoint, path: &Path) -> Result<RunConfig, Failure> {
    serde_json::from_value(ck.config.clone()).map_err(|e| {
        Failure::Lmd(LmdError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("embedded config: {e}"),
        })
    })
}

/// Resizes a `H × W × 3` tensor when it does not already match.
fn resize_to(t: &Tensor, h: usize, w: usize, origin: &Path) -> Result<Tensor, Failure> {
    if t.shape()[0] == h && t.shape()[1] == w {
        return Ok(t.clone());
    }
    warn!("resizing {} to {h}x{w}", origin.display());
    let img = lmd_core::data::from_tensor(t)?;
    Ok(lmd_core::data::to_tensor(&lmd_core::data::resize_bilinear(
        &img, w as u32, h as u32,
    )))
}

/// Resolved config, the run directory (created) and its manifest.
fn prepare(
    command: &str,
    run: &RunArgs,
    tweak: impl FnOnce(&mut RunConfig),
) -> Result<(RunConfig, PathBuf, RunManifest), Failure> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.train.seed = seed;
    }
    tweak(&mut cfg);
    cfg.resolve();
    cfg.validate()?;
    let dir = run
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(cfg.run_dir_name(command)));
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Other(format!("{}: {e}", dir.display())))?;
    let manifest = RunManifest::new(command, run.config.as_deref(), &cfg, &dir);
    Ok((cfg, dir, manifest))
}

fn load_data(root: &Path, cfg: &RunConfig, labeled: bool) -> Result<ImageDataset, Failure> {
    let [h, w] = cfg.data.image_size;
    let ds = load_dataset(root, (h, w), labeled)?;
    if ds.skipped > 0 {
        warn!("{} undecodable files skipped under {}", ds.skipped, root.display());
    }
    if ds.is_empty() {
        return Err(LmdError::InvalidArgument(format!("no images found under {}", root.display())).into());
    }
    info!("loaded {} images from {}", ds.len(), root.display());
    Ok(ds)
}

fn options(dir: &Path, progress: u64) -> RunOptions {
    RunOptions {
        diagnostic_dir: Some(dir.to_path_buf()),
        progress_every: progress,
    }
}

fn finish(dir: &Path, manifest: &RunManifest, ck: &Checkpoint, ck_name: &str, log: &MetricsLog) -> CmdResult {
    ck.save(&dir.join(ck_name))?;
    log.write_csv(&dir.join(LOG_FILE))?;
    manifest.write(dir)?;
    let s = log.summary();
    info!(
        "done: {} steps, {} loss-decrease events, final smoothed loss {}; outputs in {}",
        s.iterations,
        s.events,
        s.final_smoothed_loss.map_or("n/a".to_string(), |v| format!("{v:.6}")),
        dir.display()
    );
    Ok(())
}

fn inputs(pairs: &[(&str, &Path)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, p)| (k.to_string(), p.display().to_string()))
        .collect()
}

fn pretrain(run: RunArgs, data: &Path, progress: u64) -> CmdResult {
    let (cfg, dir, mut manifest) = prepare("pretrain-lsp", &run, |_| {})?;
    manifest.inputs = inputs(&[("data", data)]);
    let ds = load_data(data, &cfg, false)?;
    let images: Vec<Tensor> = ds.items.into_iter().map(|i| i.image).collect();
    let out = pretrain_lsp(&images, &cfg, &options(&dir, progress))?;
    finish(&dir, &manifest, &out.checkpoint, "lsp.ckpt", &out.log)
}

fn train(run: RunArgs, lsp: &Path, data: &Path, scheduler: Option<Scheme>, progress: u64) -> CmdResult {
    let lsp_ck = load_stage(lsp, Stage::Lsp)?;
    if !lsp_ck.frozen {
        return Err(LmdError::Checkpoint {
            path: lsp.to_path_buf(),
            reason: "projector checkpoint is not marked frozen (unfinished pre-training)".into(),
        }
        .into());
    }
    let proj = load_projector(&lsp_ck)?;
    let (cfg, dir, mut manifest) = prepare("train", &run, |c| {
        if let Some(s) = scheduler {
            c.schedule.scheme = s;
        }
    })?;
    manifest.inputs = inputs(&[("data", data), ("lsp", lsp)]);
    manifest.inputs.insert("lsp_hash".into(), proj.content_hash());
    let ds = load_data(data, &cfg, false)?;
    let images: Vec<Tensor> = ds.items.into_iter().map(|i| i.image).collect();
    info!("scheduler {}", cfg.schedule.scheme);
    let out = train_lmd(&images, &proj, &cfg, &options(&dir, progress))?;
    finish(&dir, &manifest, &out.checkpoint, "lsmd.ckpt", &out.log)
}

fn finetune(run: RunArgs, lsp: &Path, lsmd: Option<&Path>, data: &Path, progress: u64) -> CmdResult {
    let proj = load_projector(&load_stage(lsp, Stage::Lsp)?)?;
    let (cfg, dir, mut manifest) = prepare("finetune", &run, |_| {})?;
    let mut pairs = vec![("data", data), ("lsp", lsp)];
    let mae = match lsmd {
        Some(path) => {
            let ck = load_stage(path, Stage::Lsmd)?;
            let recorded = ck.meta.get("lsp_hash").and_then(|v| v.as_str()).unwrap_or_default();
            if recorded != proj.content_hash() {
                return Err(LmdError::Checkpoint {
                    path: path.to_path_buf(),
                    reason: "trained on a different projector than --lsp".into(),
                }
                .into());
            }
            pairs.push(("lsmd", path));
            Some(load_mae(&ck)?)
        }
        None => None,
    };
    manifest.inputs = inputs(&pairs);
    let ds = load_data(data, &cfg, true)?;
    let labels = ds
        .labels()
        .ok_or_else(|| Failure::Other("labeled dataset without labels".into()))?;
    let classes = ds.classes.len();
    let images: Vec<Tensor> = ds.items.into_iter().map(|i| i.image).collect();
    let out = finetune_classifier(
        &images,
        &labels,
        classes,
        &proj,
        mae.as_ref(),
        &cfg,
        &options(&dir, progress),
    )?;
    info!(
        "final top-1 {:.4}, top-{} {:.4}",
        out.final_top1, cfg.finetune.top_k, out.final_topk
    );
    finish(&dir, &manifest, &out.checkpoint, "finetune.ckpt", &out.log)
}

fn report(runs: &[PathBuf], out: &Path) -> CmdResult {
    let mut named = Vec::with_capacity(runs.len());
    for dir in runs {
        let ema = RunManifest::read(dir)
            .map(|m| m.config.train.ema_window)
            .unwrap_or(lmd_core::metrics::DEFAULT_EMA_WINDOW);
        let log = MetricsLog::read_csv(&dir.join(LOG_FILE), ema)?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        named.push((name, log));
    }
    std::fs::create_dir_all(out).map_err(|e| Failure::Other(format!("{}: {e}", out.display())))?;
    let csv = summary_csv(&named);
    debug_assert!(csv.starts_with(SUMMARY_HEADER));
    write_file(&out.join("summary.csv"), &csv)?;
    write_file(&out.join("curves.svg"), &curves_svg(&named))?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(json: Option<&Path>) -> CmdResult {
    let reports = run_suite(&SuiteOptions::default());
    for r in &reports {
        println!(
            "{} {:<26} max_rel_err {:.3e} coords {}{}",
            if r.passed { "ok  " } else { "FAIL" },
            r.op_name,
            r.max_rel_error,
            r.coords_checked,
            r.failure.as_deref().map(|f| format!(" ({f})")).unwrap_or_default()
        );
    }
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&reports).map_err(|e| Failure::Other(e.to_string()))?;
        write_file(path, &text)?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Other(format!(
            "{failed} of {} gradient checks failed",
            reports.len()
        )));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}
