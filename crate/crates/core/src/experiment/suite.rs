use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::hop::HopConfig;
use crate::metrics::EvalResult;
use crate::synthworld::Dataset;
use crate::train::{run_training_on, TrainConfig};

/// File written into every suite cell's run directory.
pub const CELL_FILE: &str = "cell.json";

const BUILTIN: [(&str, &str); 6] = [
    ("component", include_str!("../../suites/component.json")),
    ("temporal_decoder", include_str!("../../suites/temporal_decoder.json")),
    ("obj_decoder", include_str!("../../suites/obj_decoder.json")),
    ("pred_target", include_str!("../../suites/pred_target.json")),
    ("trunc_index", include_str!("../../suites/trunc_index.json")),
    ("connection_form", include_str!("../../suites/connection_form.json")),
];

/// A labelled configuration delta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteRow {
    pub label: String,
    pub delta: Value,
}

/// Rows of config deltas over a base config, each run once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSuite {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SuiteRow>,
}

impl AblationSuite {
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    pub fn builtin(name: &str) -> Option<AblationSuite> {
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| serde_json::from_str(text).expect("built-in suite parses"))
    }

    /// A built-in suite by name, or else a suite file.
    pub fn resolve(name_or_path: &str) -> Result<AblationSuite> {
        if let Some(s) = Self::builtin(name_or_path) {
            return Ok(s);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            let names: Vec<_> = Self::builtin_names().collect();
            return Err(Error::Config(format!(
                "no suite `{name_or_path}`; built-in suites are {}",
                names.join(", ")
            )));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// The config of every row, checked before anything runs.
    pub fn row_configs(&self, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
        if self.rows.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(format!("suite {} has no rows or no seeds", self.name)));
        }
        let mut labels: Vec<&str> = self.rows.iter().map(|r| r.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("suite {} repeats a row label", self.name)));
        }
        self.rows
            .iter()
            .map(|r| {
                apply_delta(base, &r.delta)
                    .map_err(|e| Error::Config(format!("suite {} row `{}`: {e}", self.name, r.label)))
            })
            .collect()
    }
}

/// Fully populated config, used as the shape reference for keys that are
/// `null` in the base config.
fn template() -> Value {
    let mut t = TrainConfig::default();
    t.model.hop = Some(HopConfig::default());
    serde_json::to_value(t).expect("config serializes")
}

fn merge(base: &mut Value, template: &Value, delta: &Value, path: &str) -> Result<()> {
    let Value::Object(d) = delta else {
        *base = delta.clone();
        return Ok(());
    };
    if !base.is_object() {
        // Null optional section: start from its defaults.
        *base = template.clone();
    }
    let (Value::Object(b), Value::Object(t)) = (base, template) else {
        return Err(Error::Config(format!("`{path}` is not a section")));
    };
    for (k, v) in d {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        let (Some(bv), Some(tv)) = (b.get_mut(k), t.get(k)) else {
            return Err(Error::Config(format!("delta touches undeclared key `{key}`")));
        };
        merge(bv, tv, v, &key)?;
    }
    Ok(())
}

/// `base` with `delta` merged in. The delta may only name keys that the
/// configuration declares; objects merge key by key, anything else
/// replaces.
pub fn apply_delta(base: &TrainConfig, delta: &Value) -> Result<TrainConfig> {
    if !delta.is_object() {
        return Err(Error::Config("delta must be a JSON object".into()));
    }
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, &template(), delta, "")?;
    let cfg: TrainConfig = serde_json::from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Identity of one suite cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub suite: String,
    pub label: String,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub spec: CellSpec,
    pub dir: PathBuf,
    pub result: std::result::Result<EvalResult, String>,
}

/// Directory name of a row label.
pub fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

/// Runs every (row, seed) cell into `out/<row>/seed_<s>`. A failing cell is
/// recorded in its outcome (and in `error.json` in its directory) and the
/// suite carries on.
pub fn run_suite(
    suite: &AblationSuite,
    base: &TrainConfig,
    ds: &Dataset,
    out: &Path,
    seeds: Option<&[u64]>,
    mut on_cell: impl FnMut(&CellOutcome),
) -> Result<Vec<CellOutcome>> {
    let configs = suite.row_configs(base)?;
    let seeds = seeds.unwrap_or(&suite.seeds);
    let mut outcomes = Vec::new();
    for (row, cfg) in suite.rows.iter().zip(configs) {
        for &seed in seeds {
            let dir = out.join(slug(&row.label)).join(format!("seed_{seed}"));
            let spec = CellSpec {
                suite: suite.name.clone(),
                label: row.label.clone(),
                seed,
            };
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let result = run_cell(&spec, &cfg, ds, &dir).map_err(|e| {
                let msg = e.to_string();
                let report = serde_json::json!({ "error": e.kind(), "message": msg });
                let _ = fs::create_dir_all(&dir);
                let _ = fs::write(dir.join("error.json"), report.to_string());
                msg
            });
            let outcome = CellOutcome { spec, dir, result };
            on_cell(&outcome);
            outcomes.push(outcome);
        }
    }
    Ok(outcomes)
}

fn run_cell(spec: &CellSpec, cfg: &TrainConfig, ds: &Dataset, dir: &Path) -> Result<EvalResult> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CELL_FILE);
    fs::write(&path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&path, e))?;
    Ok(run_training_on(cfg, ds, dir)?.final_eval)
}
