//! Training: batched loss/gradient evaluation, AdamW updates, periodic
//! evaluation, JSON-lines logs and resumable checkpoints.

mod checkpoint;
mod config;
mod optim;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use hopbev_autodiff::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    check_compatible, load_checkpoint, read_checkpoint_meta, save_checkpoint, ArrayEntry, Checkpoint, CheckpointMeta,
    OptimizerIndex, PayloadIndex, CHECKPOINT_FORMAT_VERSION,
};
pub use config::{TrainConfig, TRAIN_CONFIG_SCHEMA};
pub use optim::{clip_grad_norm, global_norm, AdamW, OptimizerConfig};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalFrame, EvalResult};
use crate::model::{window_sample, LossBreakdown, Model, WindowSample};
use crate::synthworld::{mix_seed, read_dataset, Dataset, NoiseConfig, SceneSequence};

const STREAM_DATA: u64 = 11;
pub const LOSSES_FILE: &str = "losses.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Rayon pool sized by `HOPBEV_NUM_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HOPBEV_NUM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("HOPBEV_NUM_THREADS={v} is not a thread count")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Mean losses, gradient norm and learning rate of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Losses and batch-mean parameter gradients. Per-window gradients are
/// computed in parallel and summed in batch order, so the result does not
/// depend on the thread count.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    batch: &[WindowSample],
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Arity("empty batch".into()));
    }
    let per: Vec<(LossBreakdown, BTreeMap<String, Tensor>)> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let f = model.training_forward(&mut g, store, s)?;
            let grads = g.backward(f.total);
            Ok((f.losses, g.param_grads(&grads)))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut iter = per.into_iter();
    let (mut losses, mut grads) = iter.next().expect("non-empty");
    for (l, gr) in iter {
        losses.total += l.total;
        losses.main += l.main;
        losses.hop += l.hop;
        losses.feature += l.feature;
        for (name, t) in gr {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    for t in grads.values_mut() {
        for x in t.data_mut() {
            *x /= n;
        }
    }
    losses.total /= n;
    losses.main /= n;
    losses.hop /= n;
    losses.feature /= n;
    Ok((losses, grads))
}

fn all_finite(l: &LossBreakdown) -> bool {
    [l.total, l.main, l.hop, l.feature].iter().all(|x| x.is_finite())
}

/// One optimizer step on `batch` at 0-based `step`. Aborts before touching
/// the parameters if any loss term or the gradient norm is non-finite.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    batch: &[WindowSample],
    step: usize,
) -> Result<StepReport> {
    let (losses, mut grads) = batch_gradients(model, store, batch)?;
    let grad_norm = clip_grad_norm(&mut grads, cfg.optimizer.clip_norm);
    if !all_finite(&losses) || !grad_norm.is_finite() {
        let windows: Vec<String> = batch.iter().map(|s| format!("{}@{}", s.seq_seed, s.end)).collect();
        return Err(Error::NonFinite {
            step,
            seed: cfg.seed,
            terms: format!(
                "total={} main={} hop={} feature={} grad_norm={grad_norm} windows=[{}]",
                losses.total,
                losses.main,
                losses.hop,
                losses.feature,
                windows.join(", ")
            ),
        });
    }
    let lr = cfg.optimizer.lr_at(step);
    opt.step(&cfg.optimizer, lr, store, &grads);
    Ok(StepReport { losses, grad_norm, lr })
}

/// The windows of 0-based `step`: sequences and window ends drawn from a
/// per-step stream, so any step can be regenerated without replaying the
/// ones before it.
pub fn sample_batch(cfg: &TrainConfig, train: &[SceneSequence], step: usize) -> Result<Vec<WindowSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_DATA, step as u64]));
    (0..cfg.batch_size)
        .map(|_| {
            let seq = &train[rng.random_range(0..train.len())];
            let ends = cfg.model.valid_window_ends(seq.frames())?;
            let end = rng.random_range(ends);
            window_sample(seq, end, &cfg.model, &cfg.noise)
        })
        .collect()
}

/// Detections on every valid window of `sequences`, scored against the
/// ground truth inside the grid.
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore,
    sequences: &[SceneSequence],
    noise: &NoiseConfig,
) -> Result<(EvalResult, Vec<EvalFrame>)> {
    let cfg = &model.cfg;
    let mut windows = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        for end in cfg.valid_window_ends(seq.frames())? {
            windows.push((i, end));
        }
    }
    let frames: Vec<EvalFrame> = windows
        .par_iter()
        .map(|&(i, end)| {
            let s = window_sample(&sequences[i], end, cfg, noise)?;
            let preds = model.detect(store, &s.obs)?;
            let gts = s
                .gt
                .iter()
                .copied()
                .filter(|b| cfg.grid.contains(b.x, b.y))
                .collect();
            Ok(EvalFrame { preds, gts })
        })
        .collect::<Result<_>>()?;
    Ok((evaluate(&frames, cfg.classes), frames))
}

/// Train/eval split: the last `eval_sequences` sequences are held out.
pub fn split_dataset<'a>(cfg: &TrainConfig, ds: &'a Dataset) -> Result<(&'a [SceneSequence], &'a [SceneSequence])> {
    let n = ds.sequences.len();
    if n <= cfg.eval_sequences {
        return Err(Error::Config(format!(
            "dataset has {n} sequences; need more than the {} held out",
            cfg.eval_sequences
        )));
    }
    Ok(ds.sequences.split_at(n - cfg.eval_sequences))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLogLine {
    pub step: usize,
    pub seed: u64,
    pub loss_total: f64,
    pub loss_main: f64,
    pub loss_hop: f64,
    pub loss_feature: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLogLine {
    pub step: usize,
    pub seed: u64,
    /// Mean training losses since the previous evaluation.
    pub loss_main: f64,
    pub loss_hop: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "ATE")]
    pub ate: f64,
    #[serde(rename = "AOE")]
    pub aoe: f64,
    #[serde(rename = "AVE")]
    pub ave: f64,
    pub composite: f64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub steps: usize,
    pub resumed_from: Option<usize>,
    pub losses: Vec<LossLogLine>,
    pub evals: Vec<MetricsLogLine>,
    pub final_eval: EvalResult,
    pub params: ParamStore,
}

fn append_line<T: Serialize>(file: &mut File, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines log, keeping entries up to `max_step`.
pub fn read_log<T: for<'de> Deserialize<'de>>(path: &Path, step_of: impl Fn(&T) -> usize, max_step: usize) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: T = serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))?;
        if step_of(&v) <= max_step {
            out.push(v);
        }
    }
    Ok(out)
}

fn rewrite_log<T: Serialize>(path: &Path, lines: &[T]) -> Result<File> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        append_line(&mut f, path, l)?;
    }
    Ok(f)
}

fn open_append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig { steps: 0, ..a.clone() } == TrainConfig { steps: 0, ..b.clone() }
}

/// Reads the dataset at `data_dir` and trains into `out_dir`.
pub fn run_training(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<RunSummary> {
    let ds = read_dataset(data_dir)?;
    run_training_on(cfg, &ds, out_dir)
}

/// Trains on an in-memory dataset. A run directory that already holds a
/// checkpoint of the same configuration is resumed from it (a larger
/// `steps` extends the run); logs past the checkpoint are discarded.
pub fn run_training_on(cfg: &TrainConfig, ds: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    if ds.classes() != cfg.model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            ds.classes(),
            cfg.model.classes
        )));
    }
    let (train, eval) = split_dataset(cfg, ds)?;
    for seq in ds.sequences.iter() {
        cfg.model.valid_window_ends(seq.frames())?;
    }
    let model = Model::new(cfg.model.clone())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    let last_dir = ckpt_dir.join("last");

    let (mut store, mut opt, start, mut best) = if last_dir.join("meta.json").exists() {
        let ck = load_checkpoint(&last_dir)?;
        if !same_run(&ck.meta.config, cfg) {
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration",
                out_dir.display()
            )));
        }
        check_compatible(&model.init_params(cfg.seed), &ck.params)?;
        let best = read_checkpoint_meta(&ckpt_dir.join("best"))
            .ok()
            .and_then(|m| m.metrics.map(|r| r.composite));
        let opt = ck.optimizer.unwrap_or_default();
        (ck.params, opt, ck.meta.step, best)
    } else {
        (model.init_params(cfg.seed), AdamW::new(), 0, None)
    };
    let resumed_from = (start > 0).then_some(start);
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;

    let losses_path = out_dir.join(LOSSES_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut losses: Vec<LossLogLine> = read_log(&losses_path, |l: &LossLogLine| l.step, start)?;
    let mut evals: Vec<MetricsLogLine> = read_log(&metrics_path, |l: &MetricsLogLine| l.step, start)?;
    drop(rewrite_log(&losses_path, &losses)?);
    drop(rewrite_log(&metrics_path, &evals)?);
    let mut losses_file = open_append(&losses_path)?;
    let mut metrics_file = open_append(&metrics_path)?;

    let pool = thread_pool()?;
    let mut last_eval = None;
    let mut since_eval: Vec<LossBreakdown> = Vec::new();
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Vec<WindowSample>>>(2);
        let producer = scope.spawn(move || {
            for step in start..cfg.steps {
                if tx.send(sample_batch(cfg, train, step)).is_err() {
                    break;
                }
            }
        });
        for step in start..cfg.steps {
            let batch = rx
                .recv()
                .map_err(|_| Error::Invariant("data producer stopped".into()))??;
            let report = match pool.install(|| train_step(&model, &mut store, &mut opt, cfg, &batch, step)) {
                Ok(r) => r,
                Err(e) => {
                    if let Error::NonFinite { step, seed, terms } = &e {
                        let dump = serde_json::json!({ "step": step, "seed": seed, "terms": terms });
                        let path = out_dir.join("nonfinite.json");
                        fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))?;
                    }
                    return Err(e);
                }
            };
            let done = step + 1;
            let line = LossLogLine {
                step: done,
                seed: cfg.seed,
                loss_total: report.losses.total,
                loss_main: report.losses.main,
                loss_hop: report.losses.hop,
                loss_feature: report.losses.feature,
                grad_norm: report.grad_norm,
                lr: report.lr,
            };
            append_line(&mut losses_file, &losses_path, &line)?;
            losses.push(line);
            since_eval.push(report.losses);

            let eval_now = done % cfg.eval_every == 0 || done == cfg.steps;
            if eval_now {
                let (result, _) = pool.install(|| evaluate_model(&model, &store, eval, &cfg.noise))?;
                let n = since_eval.len().max(1) as f64;
                let mline = MetricsLogLine {
                    step: done,
                    seed: cfg.seed,
                    loss_main: since_eval.iter().map(|l| l.main).sum::<f64>() / n,
                    loss_hop: since_eval.iter().map(|l| l.hop).sum::<f64>() / n,
                    map: result.map,
                    ate: result.ate,
                    aoe: result.aoe,
                    ave: result.ave,
                    composite: result.composite,
                };
                since_eval.clear();
                append_line(&mut metrics_file, &metrics_path, &mline)?;
                evals.push(mline);
                if best.is_none_or(|b| result.composite > b) {
                    best = Some(result.composite);
                    save_checkpoint(&ckpt_dir.join("best"), done, cfg, &store, None, Some(&result))?;
                }
                last_eval = Some(result);
            }
            if done % cfg.checkpoint_every == 0 || done == cfg.steps {
                save_checkpoint(&last_dir, done, cfg, &store, Some(&opt), last_eval.as_ref())?;
            }
        }
        drop(rx);
        producer.join().map_err(|_| Error::Invariant("data producer panicked".into()))?;
        Ok(())
    })?;

    let final_eval = match last_eval {
        Some(r) => r,
        None => pool.install(|| evaluate_model(&model, &store, eval, &cfg.noise))?.0,
    };
    save_checkpoint(&ckpt_dir.join("final"), cfg.steps.max(start), cfg, &store, None, Some(&final_eval))?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        steps: cfg.steps.max(start),
        resumed_from,
        losses,
        evals,
        final_eval,
        params: store,
    })
}
