use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use hopbev::experiment::{collect_runs, line_chart, render_csv, render_markdown, run_suite, summarize, AblationSuite, Series};
use hopbev::metrics::{pr_curve, DISTANCE_THRESHOLDS};
use hopbev::synthworld::{generate_dataset, read_dataset, write_dataset, WorldConfig};
use hopbev::train::{evaluate_model, load_checkpoint, run_training, split_dataset, TrainConfig};

/// Temporal BEV detection with historical object prediction on a synthetic
/// planar world.
#[derive(Parser, Debug)]
#[command(name = "hopbev", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        /// World config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluate on every sequence instead of the held-out split.
        #[arg(long)]
        all: bool,
        /// Also write the per-class AP table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write precision/recall curves at the 2 m threshold as SVG.
        #[arg(long)]
        pr_plot: Option<PathBuf>,
    },
    /// Run an ablation suite: one training run per row and seed.
    Ablate {
        /// Built-in suite name or suite JSON file.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        base_config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds overriding the suite's.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Tabulate completed runs, mean ± stdev over seeds per configuration.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Md,
    Csv,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(config: Option<&Path>, out: &Path, seed: u64) -> Result<serde_json::Value> {
    let world = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<WorldConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => WorldConfig::default(),
    };
    let seqs = generate_dataset(seed, &world)?;
    let manifest = write_dataset(&seqs, out, &world, None, Some(seed))?;
    Ok(json!({
        "out": out,
        "seed": seed,
        "sequences": manifest.sequences,
        "frames": manifest.frames,
        "objects": manifest.objects,
    }))
}

fn loss_plot(summary: &hopbev::train::RunSummary) -> String {
    let pick = |f: fn(&hopbev::train::LossLogLine) -> f64| summary.losses.iter().map(|l| (l.step as f64, f(l))).collect();
    let mut series = vec![
        Series {
            name: "total".into(),
            points: pick(|l| l.loss_total),
        },
        Series {
            name: "main".into(),
            points: pick(|l| l.loss_main),
        },
    ];
    if summary.losses.iter().any(|l| l.loss_hop != 0.0) {
        series.push(Series {
            name: "historical".into(),
            points: pick(|l| l.loss_hop),
        });
    }
    line_chart("Training loss", "step", "loss", &series, true)
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<serde_json::Value> {
    let cfg = TrainConfig::load(config)?;
    let summary = run_training(&cfg, data, out)?;
    write(&out.join("loss_curve.svg"), &loss_plot(&summary))?;
    Ok(json!({
        "out": out,
        "seed": cfg.seed,
        "steps": summary.steps,
        "resumed_from": summary.resumed_from,
        "final": summary.final_eval,
    }))
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    report: &Path,
    all: bool,
    csv: Option<&Path>,
    pr_plot: Option<&Path>,
) -> Result<serde_json::Value> {
    let ck = load_checkpoint(checkpoint)?;
    let model = ck.model()?;
    let cfg = &ck.meta.config;
    let ds = read_dataset(data)?;
    let sequences = if all { &ds.sequences[..] } else { split_dataset(cfg, &ds)?.1 };
    let (result, frames) = evaluate_model(&model, &ck.params, sequences, &cfg.noise)?;
    let doc = json!({
        "checkpoint": checkpoint,
        "step": ck.meta.step,
        "seed": cfg.seed,
        "split": if all { "all" } else { "held_out" },
        "sequences": sequences.len(),
        "config": cfg,
        "result": result,
    });
    write(report, &serde_json::to_string_pretty(&doc)?)?;
    if let Some(path) = csv {
        let mut s = String::from("class,gts");
        for t in DISTANCE_THRESHOLDS {
            s.push_str(&format!(",AP@{t}"));
        }
        s.push_str(",AP,ATE,AOE,AVE\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &result.per_class {
            s.push_str(&format!("{},{}", c.class, c.gts));
            for ap in &c.ap_by_threshold {
                s.push_str(&format!(",{ap}"));
            }
            s.push_str(&format!(",{},{},{},{}\n", c.ap, opt(c.ate), opt(c.aoe), opt(c.ave)));
        }
        write(path, &s)?;
    }
    if let Some(path) = pr_plot {
        let series: Vec<Series> = (0..cfg.model.classes)
            .filter_map(|c| {
                pr_curve(&frames, c, 2.0).map(|points| Series {
                    name: format!("class {c}"),
                    points,
                })
            })
            .collect();
        write(path, &line_chart("Precision/recall at 2 m", "recall", "precision", &series, false))?;
    }
    Ok(doc)
}

fn ablate(suite: &str, base: &Path, data: &Path, out: &Path, seeds: Option<&[u64]>) -> Result<serde_json::Value> {
    let suite = AblationSuite::resolve(suite)?;
    let base_cfg = TrainConfig::load(base)?;
    let ds = read_dataset(data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("suite.json"), &serde_json::to_string_pretty(&suite)?)?;
    write(&out.join("base_config.json"), &serde_json::to_string_pretty(&base_cfg)?)?;
    let outcomes = run_suite(&suite, &base_cfg, &ds, out, seeds, |c| {
        let status = match &c.result {
            Ok(r) => format!("composite {:.4}", r.composite),
            Err(e) => format!("FAILED: {e}"),
        };
        eprintln!("[{}] {} seed {}: {status}", c.spec.suite, c.spec.label, c.spec.seed);
    })?;
    let records = collect_runs(&[out.to_path_buf()])?;
    let mut rows = summarize(&records);
    rows.sort_by_key(|r| suite.rows.iter().position(|s| s.label == r.label));
    write(&out.join("summary.md"), &render_markdown(&rows))?;
    write(&out.join("summary.csv"), &render_csv(&rows))?;
    write(&out.join("summary.json"), &serde_json::to_string_pretty(&rows)?)?;
    let cells: Vec<_> = outcomes
        .iter()
        .map(|c| {
            json!({
                "label": c.spec.label,
                "seed": c.spec.seed,
                "dir": c.dir,
                "ok": c.result.is_ok(),
                "error": c.result.as_ref().err(),
            })
        })
        .collect();
    let failed = outcomes.iter().filter(|c| c.result.is_err()).count();
    let doc = json!({ "suite": suite.name, "out": out, "cells": cells, "failed": failed });
    write(&out.join("cells.json"), &serde_json::to_string_pretty(&doc)?)?;
    if failed > 0 {
        bail!(
            "{failed} of {} suite cells failed; see {}",
            outcomes.len(),
            out.join("cells.json").display()
        );
    }
    Ok(doc)
}

fn report(runs: &[PathBuf], format: Format, out: Option<&Path>) -> Result<()> {
    let records = collect_runs(runs)?;
    if records.is_empty() {
        bail!("no completed runs found");
    }
    let rows = summarize(&records);
    let text = match format {
        Format::Md => render_markdown(&rows),
        Format::Csv => render_csv(&rows),
    };
    match out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let doc = match cli.command {
        Command::Generate { config, out, seed } => generate(config.as_deref(), &out, seed)?,
        Command::Train { config, data, out } => train(&config, &data, &out)?,
        Command::Eval {
            checkpoint,
            data,
            report,
            all,
            csv,
            pr_plot,
        } => eval(&checkpoint, &data, &report, all, csv.as_deref(), pr_plot.as_deref())?,
        Command::Ablate {
            suite,
            base_config,
            data,
            out,
            seeds,
        } => ablate(&suite, &base_config, &data, &out, seeds.as_deref())?,
        Command::Report { runs, format, out } => return report(&runs, format, out.as_deref()),
    };
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<hopbev::Error>())
        .map_or("error", hopbev::Error::kind);
    let causes: Vec<String> = err.chain().map(ToString::to_string).collect();
    json!({ "error": kind, "message": err.to_string(), "causes": causes })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("HOPBEV_NUM_THREADS") {
        if let Ok(n) = n.parse() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
