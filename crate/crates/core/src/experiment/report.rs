use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::suite::{CellSpec, CELL_FILE};
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::train::{read_checkpoint_meta, CHECKPOINT_DIR, CONFIG_FILE};

/// Final evaluation of one completed run directory.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub eval: EvalResult,
}

fn final_dir(run: &Path) -> PathBuf {
    run.join(CHECKPOINT_DIR).join("final")
}

fn is_completed_run(dir: &Path) -> bool {
    dir.join(CONFIG_FILE).is_file() && final_dir(dir).join("meta.json").is_file()
}

/// Reads one run directory. The label comes from the suite cell file when
/// present, else from the directory name.
pub fn read_run(dir: &Path) -> Result<RunRecord> {
    let meta = read_checkpoint_meta(&final_dir(dir))?;
    let eval = meta
        .metrics
        .ok_or_else(|| Error::format(final_dir(dir), "final checkpoint has no evaluation"))?;
    let cell_path = dir.join(CELL_FILE);
    let label = if cell_path.is_file() {
        let text = fs::read_to_string(&cell_path).map_err(|e| Error::io(&cell_path, e))?;
        let cell: CellSpec = serde_json::from_str(&text).map_err(|e| Error::format(&cell_path, e.to_string()))?;
        cell.label
    } else {
        dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    };
    Ok(RunRecord {
        label,
        seed: meta.seed,
        dir: dir.to_path_buf(),
        eval,
    })
}

/// Completed runs at or below each path, in path order and then sorted
/// directory order. Incomplete or failed runs are skipped.
pub fn collect_runs(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for p in paths {
        if !p.is_dir() {
            return Err(Error::Config(format!("{} is not a directory", p.display())));
        }
        walk(p, &mut out)?;
    }
    Ok(out)
}

fn walk(dir: &Path, out: &mut Vec<RunRecord>) -> Result<()> {
    if is_completed_run(dir) {
        out.push(read_run(dir)?);
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        walk(&e, out)?;
    }
    Ok(())
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stdev: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stdev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, stdev }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub seeds: Vec<u64>,
    #[serde(rename = "mAP")]
    pub map: Stat,
    #[serde(rename = "ATE")]
    pub ate: Stat,
    #[serde(rename = "AOE")]
    pub aoe: Stat,
    #[serde(rename = "AVE")]
    pub ave: Stat,
    pub composite: Stat,
}

/// One row per label, in order of first appearance.
pub fn summarize(records: &[RunRecord]) -> Vec<ReportRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in records {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.label == label).collect();
            let stat = |f: fn(&EvalResult) -> f64| Stat::of(&rs.iter().map(|r| f(&r.eval)).collect::<Vec<_>>());
            ReportRow {
                label: label.to_string(),
                seeds: rs.iter().map(|r| r.seed).collect(),
                map: stat(|e| e.map),
                ate: stat(|e| e.ate),
                aoe: stat(|e| e.aoe),
                ave: stat(|e| e.ave),
                composite: stat(|e| e.composite),
            }
        })
        .collect()
}

const COLUMNS: [&str; 5] = ["mAP", "ATE", "AOE", "AVE", "composite"];

fn stats(r: &ReportRow) -> [Stat; 5] {
    [r.map, r.ate, r.aoe, r.ave, r.composite]
}

fn seeds_str(r: &ReportRow) -> String {
    r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
}

pub fn render_markdown(rows: &[ReportRow]) -> String {
    let mut s = format!("| config | seeds | {} |\n", COLUMNS.join(" | "));
    s.push_str(&format!("|---|---|{}\n", "---:|".repeat(COLUMNS.len())));
    for r in rows {
        let cells: Vec<String> = stats(r)
            .iter()
            .map(|st| format!("{:.4} ± {:.4}", st.mean, st.stdev))
            .collect();
        s.push_str(&format!("| {} | {} | {} |\n", r.label, seeds_str(r), cells.join(" | ")));
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut header = vec!["config".to_string(), "seeds".to_string()];
    for c in COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_stdev"));
    }
    let mut s = header.join(",") + "\n";
    for r in rows {
        let mut fields = vec![csv_field(&r.label), seeds_str(r)];
        for st in stats(r) {
            fields.push(format!("{}", st.mean));
            fields.push(format!("{}", st.stdev));
        }
        s.push_str(&(fields.join(",") + "\n"));
    }
    s
}
