mod ingest;
mod tables;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedpath_core::config::{apply_override, RunConfig};
use fedpath_core::datagen::generate;
use fedpath_core::federation::checkpoint::{atomic_write, checkpoint_name, latest_checkpoint};
use fedpath_core::federation::runner::{history_csv, HISTORY_FILE, REPORT_FILE};
use fedpath_core::federation::{
    assign_clients, evaluate, load_dataset, read_checkpoint, run_experiment, split_by_specimen,
    Mode, RunOptions, RunReport, RunStatus, Sample,
};
use fedpath_core::imaging::{
    preprocess, read_manifest, write_manifest, PatchRecord, StainTarget, MANIFEST_FILE, PATCH_DIR,
};
use fedpath_core::metrics::MetricsReport;
use fedpath_core::model::build_model;
use fedpath_core::{Error, Grade, Magnification, Result};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

const RUN_DIR_ENV: &str = "FEDPATH_RUN_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "fedpath",
    version,
    about = "Federated multi-scale histopathology grading simulator"
)]
struct Cli {
    /// JSON run config; built-in defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set federation.rounds=5`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    set: Vec<String>,
    /// Worker threads for client training and preprocessing (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Sets both `federation.seed` and `synth.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, value_enum, global = true)]
    mode: Option<ModeArg>,
    /// Continue from the run's `latest` checkpoint (default).
    #[arg(long, global = true, overrides_with = "no_resume")]
    resume: bool,
    /// Discard existing checkpoints in the run directory and start over.
    #[arg(long, global = true, overrides_with = "resume")]
    no_resume: bool,
    /// Suppress per-round progress lines.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Fed,
    Central,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset described by the `synth` config section.
    Datagen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stain-normalize, tile and filter a folder tree or ZIP of `<grade>/<mag>/<id>.png`.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the train/val/test split and the client assignment for a manifest.
    Partition {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run (or resume) federated or centralized training.
    Train,
    /// Evaluate a run checkpoint on a split, or score a predictions file.
    Evaluate {
        /// Run directory holding config.json and checkpoints.
        #[arg(long, conflicts_with = "predictions")]
        run: Option<PathBuf>,
        /// Round to evaluate (default: the `latest` checkpoint).
        #[arg(long, requires = "run")]
        round: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// JSON-lines file of `{"label", "pred", "magnification"}` rows.
        #[arg(long, required_unless_present = "run")]
        predictions: Option<PathBuf>,
        /// Output directory for `--predictions` (receives report.json).
        #[arg(long, requires = "predictions")]
        out: Option<PathBuf>,
    },
    /// Print report tables for a finished run and write report.txt.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Second run to compare against (e.g. the centralized baseline).
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut root: Value = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => json!({}),
    };
    for kv in &cli.set {
        apply_override(&mut root, kv)?;
    }
    if let Some(seed) = cli.seed {
        apply_override(&mut root, &format!("federation.seed={seed}"))?;
        apply_override(&mut root, &format!("synth.seed={seed}"))?;
    }
    if let Some(mode) = cli.mode {
        let m = match mode {
            ModeArg::Fed => Mode::Federated,
            ModeArg::Central => Mode::Centralized,
        };
        apply_override(&mut root, &format!("federation.mode={}", m.as_str()))?;
    }
    RunConfig::from_value(root)
}

fn runs_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(RUN_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output.runs_dir.clone())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn cmd_datagen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let records = generate(&cfg.synth, out)?;
    println!("wrote {} images to {}", records.len(), out.display());
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let images = ingest::read_input(input)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no <grade>/<magnification>/<id>.png images under {}",
            input.display()
        )));
    }
    let result = preprocess(images, &cfg.preprocess, &StainTarget::standard())?;
    let patch_dir = out.join(PATCH_DIR);
    create_dir(&patch_dir)?;
    result
        .patches
        .par_iter()
        .map(|(rec, img)| img.write_png(&patch_dir.join(rec.patch_file_name())))
        .collect::<Result<()>>()?;
    let records: Vec<PatchRecord> = result.patches.into_iter().map(|(r, _)| r).collect();
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    write_json(&out.join("preprocess_stats.json"), &result.stats)?;
    let s = &result.stats;
    println!(
        "{} images -> {} patches kept (blur {}, pen {}, duplicate {}, stain fallback {})",
        s.images, s.kept, s.rejected_blur, s.rejected_pen, s.rejected_duplicate, s.stain_fallbacks
    );
    Ok(())
}

fn cmd_partition(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let records = read_manifest(manifest)?;
    let refs: Vec<&PatchRecord> = records.iter().collect();
    let splits = split_by_specimen(
        &refs,
        cfg.data.train_fraction,
        cfg.data.val_fraction,
        cfg.data.split_seed,
    )?;
    let clients = assign_clients(&refs, &splits.train, &cfg.federation)?;
    let names = |idx: &[usize]| -> Vec<String> {
        idx.iter().map(|&i| records[i].patch_file_name()).collect()
    };
    let counts = |idx: &[usize]| {
        let mut c = [0usize; 3];
        for &i in idx {
            c[records[i].label.index()] += 1;
        }
        c
    };
    let doc = json!({
        "config_hash": format!("{:016x}", cfg.hash()),
        "mode": cfg.federation.mode,
        "clients": clients.iter().enumerate().map(|(k, idx)| json!({
            "client_id": k,
            "n_samples": idx.len(),
            "class_counts": counts(idx),
            "patches": names(idx),
        })).collect::<Vec<_>>(),
        "val": names(&splits.val),
        "test": names(&splits.test),
    });
    write_json(out, &doc)?;
    for (k, idx) in clients.iter().enumerate() {
        let c = counts(idx);
        println!("client {k}: {} samples, class counts {c:?}", idx.len());
    }
    println!(
        "val {} / test {} samples",
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, opts: &RunOptions) -> Result<()> {
    let samples = load_dataset(&cfg.data.dataset_dir)?;
    let run_dir = runs_root(cfg).join(cfg.run_id());
    let outcome = run_experiment(cfg, &samples, &run_dir, opts)?;
    let report = outcome.report.as_ref();
    match (outcome.status, report) {
        (RunStatus::AlreadyComplete, Some(r)) => println!(
            "run {} already complete ({} rounds); test accuracy {:.4}",
            r.run_id, r.rounds_completed, r.test.accuracy
        ),
        (RunStatus::Completed, Some(r)) => println!(
            "run {} complete: test accuracy {:.4}, macro F1 {:.4} (round {})\n{}",
            r.run_id,
            r.test.accuracy,
            r.test.macro_f1,
            r.evaluated_round,
            run_dir.display()
        ),
        (status, _) => println!("run stopped: {status:?}"),
    }
    Ok(())
}

#[derive(Deserialize)]
struct PredictionRow {
    label: String,
    pred: String,
    magnification: String,
}

fn score_predictions(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut truth, mut pred, mut mags) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let row: PredictionRow = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        truth.push(
            row.label
                .parse::<Grade>()
                .map_err(|e| bad(e.to_string()))?
                .index(),
        );
        pred.push(
            row.pred
                .parse::<Grade>()
                .map_err(|e| bad(e.to_string()))?
                .index(),
        );
        mags.push(
            row.magnification
                .parse::<Magnification>()
                .map_err(|e| bad(e.to_string()))?,
        );
    }
    MetricsReport::from_predictions(&truth, &pred, &mags)
}

fn evaluate_run(cli_cfg: &Cli, run: &Path, round: Option<usize>, split: SplitArg) -> Result<()> {
    let cfg = RunConfig::load(&run.join("config.json"))?;
    let ckpt = match round {
        Some(r) => run.join(checkpoint_name(r)),
        None => latest_checkpoint(run)?
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint in {}", run.display())))?,
    };
    let (header, params) = read_checkpoint(&ckpt)?;
    if header.config_hash != format!("{:016x}", cfg.hash()) {
        return Err(Error::Checkpoint(format!(
            "{} does not match the run's config.json",
            ckpt.display()
        )));
    }
    let samples = load_dataset(&cfg.data.dataset_dir)?;
    let refs: Vec<&PatchRecord> = samples.iter().map(|s| &s.record).collect();
    let splits = split_by_specimen(
        &refs,
        cfg.data.train_fraction,
        cfg.data.val_fraction,
        cfg.data.split_seed,
    )?;
    let (name, idx) = match split {
        SplitArg::Train => ("train", &splits.train),
        SplitArg::Val => ("val", &splits.val),
        SplitArg::Test => ("test", &splits.test),
    };
    let subset: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
    let mut model = build_model(&cfg.model, cfg.federation.seed)?;
    model.set_params(params)?;
    let metrics = evaluate(&model, &subset)?;
    let out = run.join(format!("eval_{name}_round_{}.json", header.round));
    write_json(&out, &metrics)?;
    if !cli_cfg.quiet {
        let mut text = String::new();
        tables::overall(
            &mut text,
            &format!("{name} split, round {}", header.round),
            &metrics,
        );
        tables::grade_wise(&mut text, &metrics);
        tables::magnification(&mut text, &metrics);
        print!("{text}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn read_report(run: &Path) -> Result<RunReport> {
    let path = run.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_report(run: &Path, compare: Option<&Path>) -> Result<()> {
    let report = read_report(run)?;
    let other = compare.map(read_report).transpose()?;
    let text = tables::render(&report, other.as_ref());
    atomic_write(&run.join("report.txt"), text.as_bytes())?;
    let history = run.join(HISTORY_FILE);
    if !history.exists() {
        atomic_write(&history, history_csv(&report.history).as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Datagen { out } => cmd_datagen(&cfg, out),
        Command::Preprocess { input, out } => cmd_preprocess(&cfg, input, out),
        Command::Partition { manifest, out } => cmd_partition(&cfg, manifest, out),
        Command::Train => cmd_train(
            &cfg,
            &RunOptions {
                resume: cli.resume || !cli.no_resume,
                verbose: !cli.quiet,
                ..Default::default()
            },
        ),
        Command::Evaluate {
            run,
            round,
            split,
            predictions,
            out,
        } => match (run, predictions) {
            (Some(run), _) => evaluate_run(cli, run, *round, *split),
            (None, Some(pred)) => {
                let metrics = score_predictions(pred)?;
                let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
                create_dir(&dir)?;
                let path = dir.join(REPORT_FILE);
                write_json(&path, &metrics)?;
                println!("accuracy {:.4}; wrote {}", metrics.accuracy, path.display());
                Ok(())
            }
            (None, None) => Err(Error::Config(
                "evaluate needs --run or --predictions".into(),
            )),
        },
        Command::Report { run, compare } => cmd_report(run, compare.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
