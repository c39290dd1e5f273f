//! Round orchestration for federated and centralized runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{fedavg_aggregate, ClientUpdate};
use super::checkpoint::{
    atomic_write, checkpoint_name, latest_checkpoint, read_checkpoint, write_checkpoint,
    CheckpointHeader, CHECKPOINT_FORMAT, LATEST_FILE,
};
use super::config::{client_seed, EvalCheckpoint, FederationConfig, Mode};
use super::data::{specimen_groups, split_by_specimen, Sample, Splits};
use super::partition::{partition_dirichlet, ClientShard};
use super::train::{evaluate, local_train, LocalResult};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imaging::PatchRecord;
use crate::labels::{Grade, NUM_GRADES};
use crate::metrics::MetricsReport;
use crate::model::{build_model, DualStreamModel};
use crate::nn::ParamVector;

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";

/// Runtime switches that do not affect results and so are not part of the config.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub resume: bool,
    /// Return right after this round's checkpoint, as if the process were killed.
    pub stop_after_round: Option<usize>,
    /// `(round, client_id)` pairs whose local training is made to fail.
    pub fail_clients: BTreeSet<(usize, usize)>,
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            resume: true,
            stop_after_round: None,
            fail_clients: BTreeSet::new(),
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub round: usize,
    pub train_loss_mean: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub wall_time_s: f64,
    pub best_round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientInfo {
    pub client_id: usize,
    pub n_samples: usize,
    pub class_counts: [usize; NUM_GRADES],
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub mode: Mode,
    pub config_hash: String,
    pub rounds_completed: usize,
    pub best_round: usize,
    pub best_val_accuracy: f64,
    pub eval_checkpoint: EvalCheckpoint,
    pub evaluated_round: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub clients: Vec<ClientInfo>,
    pub history: Vec<HistoryRow>,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// A previous invocation already finished this run; nothing was recomputed.
    AlreadyComplete,
    Interrupted {
        round: usize,
    },
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub run_dir: PathBuf,
    pub report: Option<RunReport>,
    /// Global parameters after the last executed round.
    pub final_params: ParamVector,
    /// Per executed round, per client (ascending id), the loss of every optimizer step.
    pub step_losses: Vec<Vec<(usize, Vec<f64>)>>,
}

/// Result of one communication round.
#[derive(Debug, Clone)]
pub struct RoundResult {
    pub global: ParamVector,
    pub per_client_n: Vec<usize>,
    pub failed_clients: Vec<usize>,
    pub client_seeds: Vec<u64>,
    pub train_loss_mean: f64,
    pub step_losses: Vec<(usize, Vec<f64>)>,
}

/// A client and the samples it holds.
#[derive(Debug, Clone)]
pub struct ClientData<'a> {
    pub client_id: usize,
    pub samples: Vec<&'a Sample>,
    pub class_counts: [usize; NUM_GRADES],
}

fn class_counts(samples: &[&Sample]) -> [usize; NUM_GRADES] {
    let mut c = [0; NUM_GRADES];
    for s in samples {
        c[s.label().index()] += 1;
    }
    c
}

/// Assigns the training specimens to clients (Dirichlet label skew), keeping every image
/// of a specimen on the same client. Returns per-client indices into `records`, taken
/// from `train`. Centralized mode yields one pooled client.
pub fn assign_clients(
    records: &[&PatchRecord],
    train: &[usize],
    cfg: &FederationConfig,
) -> Result<Vec<Vec<usize>>> {
    if cfg.mode == Mode::Centralized {
        let mut all = train.to_vec();
        all.sort_unstable();
        return Ok(vec![all]);
    }
    let train_records: Vec<&PatchRecord> = train.iter().map(|&i| records[i]).collect();
    let groups = specimen_groups(&train_records)?;
    let unit_labels: Vec<Grade> = groups.iter().map(|g| g.1).collect();
    let seed = cfg.seed ^ 0x5041_5254_4954_494f;
    let shards: Vec<ClientShard> =
        partition_dirichlet(&unit_labels, cfg.n_clients, cfg.dirichlet_alpha, seed)?;
    Ok(shards
        .iter()
        .map(|shard| {
            let mut idx: Vec<usize> = shard
                .indices
                .iter()
                .flat_map(|&u| groups[u].2.iter().map(|&t| train[t]))
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect())
}

/// [`assign_clients`] resolved to samples.
pub fn make_clients<'a>(
    samples: &'a [Sample],
    train: &[usize],
    cfg: &FederationConfig,
) -> Result<Vec<ClientData<'a>>> {
    let records: Vec<&PatchRecord> = samples.iter().map(|s| &s.record).collect();
    Ok(assign_clients(&records, train, cfg)?
        .into_iter()
        .enumerate()
        .map(|(client_id, idx)| {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            ClientData {
                client_id,
                class_counts: class_counts(&samples),
                samples,
            }
        })
        .collect())
}

/// Trains every client from `global` (in parallel on the current rayon pool), drops the
/// ones that fail and averages the rest.
pub fn run_round(
    round: usize,
    global: &ParamVector,
    model: &DualStreamModel,
    clients: &[ClientData<'_>],
    cfg: &FederationConfig,
    fail_clients: &BTreeSet<(usize, usize)>,
) -> Result<RoundResult> {
    let outcomes: Vec<(u64, Result<LocalResult>)> = clients
        .par_iter()
        .map(|c| {
            let mut last = None;
            for attempt in 0..=cfg.client_retries {
                let seed = client_seed(cfg.seed, c.client_id, round, attempt);
                let res = if fail_clients.contains(&(round, c.client_id)) {
                    Err(Error::ClientFailure {
                        client_id: c.client_id,
                        round,
                        cause: "injected failure".into(),
                    })
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    local_train(model, &c.samples, global, cfg, c.client_id, round, &mut rng)
                };
                let retry = matches!(res, Err(Error::ClientFailure { .. }));
                last = Some((seed, res));
                if !retry {
                    break;
                }
            }
            last.expect("at least one attempt")
        })
        .collect();

    let mut survivors = Vec::new();
    let mut failed = Vec::new();
    let mut seeds = Vec::new();
    for (c, (seed, res)) in clients.iter().zip(outcomes) {
        seeds.push(seed);
        match res {
            Ok(r) => survivors.push(r),
            Err(Error::ClientFailure { .. }) => failed.push(c.client_id),
            Err(e) => return Err(e),
        }
    }
    if survivors.is_empty() {
        return Err(Error::Aggregation(format!(
            "all clients failed in round {round}"
        )));
    }
    let updates: Vec<ClientUpdate<'_>> = survivors
        .iter()
        .map(|r| ClientUpdate {
            client_id: r.client_id,
            params: &r.params,
            n_k: r.n_k,
        })
        .collect();
    let new_global = fedavg_aggregate(&updates)?;
    let n_total: usize = survivors.iter().map(|r| r.n_k).sum();
    let train_loss_mean = survivors
        .iter()
        .map(|r| r.train_loss * r.n_k as f64)
        .sum::<f64>()
        / n_total as f64;
    let per_client_n = clients
        .iter()
        .map(|c| {
            survivors
                .iter()
                .find(|r| r.client_id == c.client_id)
                .map_or(0, |r| r.n_k)
        })
        .collect();
    Ok(RoundResult {
        global: new_global,
        per_client_n,
        failed_clients: failed,
        client_seeds: seeds,
        train_loss_mean,
        step_losses: survivors
            .into_iter()
            .map(|r| (r.client_id, r.step_losses))
            .collect(),
    })
}

/// `history.csv` contents, one row per completed round.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s =
        String::from("round,train_loss_mean,val_accuracy,val_macro_f1,wall_time_s,best_round\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.3},{}",
            r.round, r.train_loss_mean, r.val_accuracy, r.val_macro_f1, r.wall_time_s, r.best_round
        );
    }
    s
}

fn history_row(h: &CheckpointHeader) -> HistoryRow {
    let val = h.val.as_ref();
    HistoryRow {
        round: h.round,
        train_loss_mean: h.train_loss_mean.unwrap_or(f64::NAN),
        val_accuracy: val.map_or(f64::NAN, |v| v.accuracy),
        val_macro_f1: val.map_or(f64::NAN, |v| v.macro_f1),
        wall_time_s: h.wall_time_s,
        best_round: h.best_round,
    }
}

fn clear_run_artifacts(dir: &Path) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let ours = (name.starts_with("ckpt_round_") && name.ends_with(".bin"))
            || [LATEST_FILE, HISTORY_FILE, REPORT_FILE].contains(&name.as_str());
        if ours {
            fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(())
}

fn log(verbose: bool, msg: impl FnOnce() -> String) {
    if verbose {
        eprintln!("{}", msg());
    }
}

/// Splits `samples`, builds clients and runs (or resumes) `cfg.federation.rounds` rounds
/// inside `run_dir`, then evaluates the chosen checkpoint on the test split.
pub fn run_experiment(
    cfg: &RunConfig,
    samples: &[Sample],
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let fed = &cfg.federation;
    let hash = format!("{:016x}", cfg.hash());
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;

    let records: Vec<_> = samples.iter().map(|s| &s.record).collect();
    let splits: Splits = split_by_specimen(
        &records,
        cfg.data.train_fraction,
        cfg.data.val_fraction,
        cfg.data.split_seed,
    )?;
    let train_samples: Vec<&Sample> = splits.train.iter().map(|&i| &samples[i]).collect();
    let counts = class_counts(&train_samples);
    if let Some(g) = Grade::ALL.iter().find(|g| counts[g.index()] == 0) {
        return Err(Error::EmptyClass(format!("{g} (training split)")));
    }
    if splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::Config(
            "dataset too small: validation or test split is empty".into(),
        ));
    }
    let val: Vec<&Sample> = splits.val.iter().map(|&i| &samples[i]).collect();
    let test: Vec<&Sample> = splits.test.iter().map(|&i| &samples[i]).collect();

    let mut train_cfg = fed.clone();
    if fed.mode == Mode::Centralized {
        train_cfg.mu = 0.0;
    }
    let clients = make_clients(samples, &splits.train, &train_cfg)?;
    let mut model = build_model(&cfg.model, fed.seed)?;

    if !opts.resume {
        clear_run_artifacts(run_dir)?;
    }
    let config_path = run_dir.join(CONFIG_FILE);
    atomic_write(&config_path, cfg.canonical_json().as_bytes())?;

    // Resume point.
    let mut history = Vec::new();
    let mut last: Option<(CheckpointHeader, ParamVector)> = None;
    if let Some(path) = latest_checkpoint(run_dir)? {
        let (header, params) = read_checkpoint(&path)?;
        if header.config_hash != hash {
            return Err(Error::Config(format!(
                "refusing to resume {}: checkpoint config hash {} != current {hash}",
                run_dir.display(),
                header.config_hash
            )));
        }
        for r in 1..=header.round {
            let (h, _) = read_checkpoint(&run_dir.join(checkpoint_name(r)))?;
            history.push(history_row(&h));
        }
        last = Some((header, params));
    }

    let report_path = run_dir.join(REPORT_FILE);
    if let Some((h, params)) = &last {
        if h.round == fed.rounds && report_path.exists() {
            let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
            let report: RunReport = serde_json::from_str(&text)?;
            if report.config_hash == hash {
                return Ok(RunOutcome {
                    status: RunStatus::AlreadyComplete,
                    run_dir: run_dir.to_path_buf(),
                    report: Some(report),
                    final_params: params.clone(),
                    step_losses: Vec::new(),
                });
            }
        }
        if h.round > fed.rounds {
            return Err(Error::Checkpoint(format!(
                "checkpoint round {} exceeds configured rounds {}",
                h.round, fed.rounds
            )));
        }
    }

    let started = Instant::now();
    let (mut global, mut state) = match last {
        Some((h, p)) => {
            log(opts.verbose, || format!("resuming after round {}", h.round));
            (p, h)
        }
        None => {
            let p = model.params().clone();
            model.set_params(p.clone())?;
            let val_m = evaluate(&model, &val)?;
            let header = CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                round: 0,
                config_hash: hash.clone(),
                per_client_n: clients.iter().map(|c| c.samples.len()).collect(),
                failed_clients: Vec::new(),
                client_seeds: Vec::new(),
                train_loss_mean: None,
                best_round: 0,
                best_val_accuracy: val_m.accuracy,
                val: Some(val_m),
                wall_time_s: 0.0,
            };
            write_checkpoint(run_dir, &header, &p)?;
            (p, header)
        }
    };
    let base_wall = state.wall_time_s;

    let mut step_losses = Vec::new();
    for round in state.round + 1..=fed.rounds {
        let rr = run_round(
            round,
            &global,
            &model,
            &clients,
            &train_cfg,
            &opts.fail_clients,
        )?;
        global = rr.global;
        model.set_params(global.clone())?;
        let val_m = evaluate(&model, &val)?;
        let (best_round, best_acc) =
            if state.round == 0 || val_m.accuracy >= state.best_val_accuracy {
                (round, val_m.accuracy)
            } else {
                (state.best_round, state.best_val_accuracy)
            };
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            round,
            config_hash: hash.clone(),
            per_client_n: rr.per_client_n,
            failed_clients: rr.failed_clients,
            client_seeds: rr.client_seeds,
            train_loss_mean: Some(rr.train_loss_mean),
            best_round,
            best_val_accuracy: best_acc,
            val: Some(val_m),
            wall_time_s: base_wall + started.elapsed().as_secs_f64(),
        };
        write_checkpoint(run_dir, &header, &global)?;
        history.push(history_row(&header));
        atomic_write(
            &run_dir.join(HISTORY_FILE),
            history_csv(&history).as_bytes(),
        )?;
        step_losses.push(rr.step_losses);
        log(opts.verbose, || {
            let r = history.last().unwrap();
            format!(
                "[{}] round {round}/{} train_loss={:.4} val_acc={:.4} val_macro_f1={:.4} best_round={} failed={:?}",
                fed.mode.as_str(),
                fed.rounds,
                r.train_loss_mean,
                r.val_accuracy,
                r.val_macro_f1,
                r.best_round,
                header.failed_clients
            )
        });
        state = header;
        if opts.stop_after_round == Some(round) && round < fed.rounds {
            return Ok(RunOutcome {
                status: RunStatus::Interrupted { round },
                run_dir: run_dir.to_path_buf(),
                report: None,
                final_params: global,
                step_losses,
            });
        }
    }
    if history.is_empty() {
        atomic_write(
            &run_dir.join(HISTORY_FILE),
            history_csv(&history).as_bytes(),
        )?;
    }

    let evaluated_round = match fed.eval_checkpoint {
        EvalCheckpoint::Best => state.best_round,
        EvalCheckpoint::Final => state.round,
    };
    let (_, eval_params) = read_checkpoint(&run_dir.join(checkpoint_name(evaluated_round)))?;
    model.set_params(eval_params)?;
    let report = RunReport {
        run_id: cfg.run_id(),
        mode: fed.mode,
        config_hash: hash,
        rounds_completed: state.round,
        best_round: state.best_round,
        best_val_accuracy: state.best_val_accuracy,
        eval_checkpoint: fed.eval_checkpoint,
        evaluated_round,
        n_train: splits.train.len(),
        n_val: splits.val.len(),
        n_test: splits.test.len(),
        clients: clients
            .iter()
            .map(|c| ClientInfo {
                client_id: c.client_id,
                n_samples: c.samples.len(),
                class_counts: c.class_counts,
            })
            .collect(),
        history,
        val: evaluate(&model, &val)?,
        test: evaluate(&model, &test)?,
    };
    atomic_write(
        &report_path,
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    log(opts.verbose, || {
        format!(
            "test accuracy {:.4} (round {evaluated_round}), macro F1 {:.4}",
            report.test.accuracy, report.test.macro_f1
        )
    });
    Ok(RunOutcome {
        status: RunStatus::Completed,
        run_dir: run_dir.to_path_buf(),
        report: Some(report),
        final_params: global,
        step_losses,
    })
}
