//! Ablation matrices: named cells of configuration overrides, run one after
//! another into separate directories, with a summary table of final clean
//! returns.
//!
//! Matrix files hold one cell per line, `name: key=value key=value ...`.
//! Blank lines and `#` comments are ignored.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainer::train;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl AblationCell {
    fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// `base` with this cell's overrides applied and validated.
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationMatrix {
    pub cells: Vec<AblationCell>,
}

pub const PRESETS: &[&str] = &["loss-components", "sampling-steps", "risk-interval", "consistency-weight"];

impl AblationMatrix {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cells = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, rest) = line.split_once(':').ok_or_else(|| {
                Error::InvalidArgument(format!("matrix line {}: expected `name: key=value ...`", lineno + 1))
            })?;
            let name = name.trim();
            if name.is_empty() || name.contains(['/', '\\']) {
                return Err(Error::InvalidArgument(format!("matrix line {}: bad cell name `{name}`", lineno + 1)));
            }
            let mut overrides = Vec::new();
            for pair in rest.split_whitespace() {
                let (k, v) = pair.split_once('=').ok_or_else(|| {
                    Error::InvalidArgument(format!("matrix line {}: `{pair}` is not key=value", lineno + 1))
                })?;
                overrides.push((k.to_string(), v.to_string()));
            }
            if cells.iter().any(|c: &AblationCell| c.name == name) {
                return Err(Error::InvalidArgument(format!("duplicate cell name `{name}`")));
            }
            cells.push(AblationCell {
                name: name.to_string(),
                overrides,
            });
        }
        Ok(Self { cells })
    }

    /// Built-in matrices.
    ///
    /// * `loss-components`: cumulative rows from the scalar-critic baseline
    ///   to the full method, adding one component per row.
    /// * `sampling-steps`: inference Euler steps 1, 5, 10, 20.
    /// * `risk-interval`: tail fraction 0 (tail losses off), 0.05, 0.1, 0.2.
    /// * `consistency-weight`: 0.001, 0.005, 0.01, 0.05.
    pub fn preset(name: &str) -> Result<Self> {
        let cells = match name {
            "loss-components" => {
                let bare = [
                    ("mode", "dfpo"),
                    ("coupling", "independent"),
                    ("lambda_reg", "0"),
                    ("lambda_cons", "0"),
                    ("lambda_risk", "0"),
                    ("lambda_shape", "0"),
                    ("use_conf_weight", "false"),
                    ("spectral_norm", "false"),
                ];
                let steps: [(&str, &[(&str, &str)]); 7] = [
                    ("distributional", &[]),
                    ("dcfm", &[("coupling", "quantile")]),
                    ("risk", &[("lambda_risk", "0.5")]),
                    ("shape", &[("lambda_shape", "0.5")]),
                    ("uncertainty", &[("use_conf_weight", "true")]),
                    ("consistency", &[("lambda_reg", "0.1"), ("lambda_cons", "0.01")]),
                    ("lipschitz", &[("spectral_norm", "true")]),
                ];
                let mut cells = vec![AblationCell::new("base", &[("mode", "scalar")])];
                let mut acc: Vec<(&str, &str)> = bare.to_vec();
                for (row, extra) in steps {
                    for &(k, v) in extra {
                        match acc.iter_mut().find(|(key, _)| *key == k) {
                            Some(slot) => slot.1 = v,
                            None => acc.push((k, v)),
                        }
                    }
                    cells.push(AblationCell::new(row, &acc));
                }
                cells
            }
            "sampling-steps" => ["1", "5", "10", "20"]
                .iter()
                .map(|s| AblationCell::new(&format!("steps-{s}"), &[("inference_steps", s)]))
                .collect(),
            "risk-interval" => {
                let mut cells = vec![AblationCell::new(
                    "interval-0",
                    &[("lambda_risk", "0"), ("lambda_shape", "0")],
                )];
                for x in ["0.05", "0.1", "0.2"] {
                    cells.push(AblationCell::new(&format!("interval-{x}"), &[("alpha", x), ("beta", x)]));
                }
                cells
            }
            "consistency-weight" => ["0.001", "0.005", "0.01", "0.05"]
                .iter()
                .map(|w| AblationCell::new(&format!("cons-{w}"), &[("lambda_cons", w)]))
                .collect(),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown ablation preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self { cells })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome {
    pub cell: String,
    pub status: &'static str,
    pub final_clean_return: Option<f64>,
    pub final_ood_return: Option<f64>,
    pub error: Option<String>,
}

/// Run every cell under `out_dir/<cell>` and write `out_dir/summary.csv`.
/// A failing cell is recorded and the remaining cells still run.
pub fn run_ablation(base: &RunConfig, matrix: &AblationMatrix, out_dir: &Path) -> Result<Vec<CellOutcome>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outcomes = Vec::with_capacity(matrix.cells.len());
    for cell in &matrix.cells {
        let dir: PathBuf = out_dir.join(&cell.name);
        let result = cell.apply(base).and_then(|cfg| {
            let seed = cfg.seed;
            let out = train(cfg, Some(&dir), None)?;
            let clean = out.trainer.evaluate(final_eval_seed(seed), false)?;
            let ood = out.trainer.evaluate(final_eval_seed(seed), true)?;
            Ok((clean.mean_return, ood.mean_return))
        });
        outcomes.push(match result {
            Ok((clean, ood)) => CellOutcome {
                cell: cell.name.clone(),
                status: "ok",
                final_clean_return: Some(clean),
                final_ood_return: Some(ood),
                error: None,
            },
            Err(e) => CellOutcome {
                cell: cell.name.clone(),
                status: "failed",
                final_clean_return: None,
                final_ood_return: None,
                error: Some(e.to_string()),
            },
        });
    }
    write_summary(&out_dir.join("summary.csv"), &outcomes)?;
    Ok(outcomes)
}

/// Seed of the end-of-run evaluation, separate from the training stream.
pub fn final_eval_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_F1A1
}

pub fn write_summary(path: &Path, outcomes: &[CellOutcome]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(io)?;
    w.write_record(["cell", "status", "final_clean_return", "final_ood_return", "error"])
        .map_err(io)?;
    for o in outcomes {
        w.serialize(o).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_blank_lines() {
        let m = AblationMatrix::parse("# header\n\na: K=10 alpha=0.2\nb:   # nothing\n").unwrap();
        assert_eq!(m.cells.len(), 2);
        assert_eq!(m.cells[0].overrides, vec![("K".into(), "10".into()), ("alpha".into(), "0.2".into())]);
        assert!(m.cells[1].overrides.is_empty());
    }

    #[test]
    fn parse_rejects_malformed_lines() {
        assert!(AblationMatrix::parse("no colon here").is_err());
        assert!(AblationMatrix::parse("a: K10").is_err());
        assert!(AblationMatrix::parse("a: K=1\na: K=2").is_err());
        assert!(AblationMatrix::parse("../x: K=1").is_err());
    }

    #[test]
    fn presets_validate_against_defaults() {
        let base = RunConfig::default();
        for name in PRESETS {
            let m = AblationMatrix::preset(name).unwrap();
            assert!(!m.cells.is_empty());
            for cell in &m.cells {
                cell.apply(&base).unwrap_or_else(|e| panic!("{name}/{}: {e}", cell.name));
            }
        }
        assert!(AblationMatrix::preset("nope").is_err());
    }

    #[test]
    fn loss_component_rows_are_cumulative() {
        let m = AblationMatrix::preset("loss-components").unwrap();
        let base = RunConfig::default();
        let full = m.cells.last().unwrap().apply(&base).unwrap();
        assert_eq!(full.loss_weights(), base.loss_weights());
        assert!(full.use_conf_weight && full.spectral_norm);
        let dist = m.cells[1].apply(&base).unwrap();
        assert_eq!(dist.lambda_risk, 0.0);
        assert!(!dist.use_conf_weight);
    }
}
