//! Ablation tables and single-parameter sweeps over shared data.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TspmError};
use crate::features::Dataset;
use crate::model::Ablation;
use crate::train::{evaluate, train, EvalReport, TrainConfig};

/// One trained and evaluated variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub name: String,
    pub best_epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub rows: Vec<ExperimentRow>,
}

/// Data shared by every run of an experiment.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub test: &'a Dataset,
}

fn run(name: String, splits: Splits<'_>, cfg: &TrainConfig) -> Result<ExperimentRow> {
    let outcome = train(splits.train, splits.val, cfg, None)?;
    let model = if splits.val.is_some() {
        &outcome.best
    } else {
        &outcome.last
    };
    Ok(ExperimentRow {
        name,
        best_epoch: outcome.best_epoch,
        report: evaluate(model, splits.test)?,
    })
}

/// The variants of an ablation study: the full model, then each component
/// removed on its own.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut full = base.clone();
    full.ablation.clear();
    let mut out = vec![("full".to_string(), full.clone())];
    for a in Ablation::ALL {
        let mut cfg = full.clone();
        cfg.ablation.insert(a);
        out.push((a.name().to_string(), cfg));
    }
    out
}

/// Train and evaluate the full model and every single-component ablation
/// with the seed of `base`.
pub fn run_ablation(base: &TrainConfig, splits: Splits<'_>) -> Result<ExperimentTable> {
    let rows = ablation_variants(base)
        .into_iter()
        .map(|(name, cfg)| run(name, splits, &cfg))
        .collect::<Result<_>>()?;
    Ok(ExperimentTable { rows })
}

/// Parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    TopK,
    Tokens,
}

impl std::str::FromStr for SweepParam {
    type Err = TspmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top_k" => Ok(SweepParam::TopK),
            "tokens" => Ok(SweepParam::Tokens),
            other => Err(TspmError::Config(format!(
                "unknown sweep parameter {other:?} (expected top_k or tokens)"
            ))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::TopK => "top_k",
            SweepParam::Tokens => "tokens",
        }
    }
}

/// One run per value of `param`, all with the seed of `base`.
pub fn sweep(
    param: SweepParam,
    values: &[usize],
    base: &TrainConfig,
    splits: Splits<'_>,
) -> Result<ExperimentTable> {
    if values.is_empty() {
        return Err(TspmError::Config("sweep needs at least one value".into()));
    }
    let rows = values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            match param {
                SweepParam::TopK => cfg.top_k = v,
                SweepParam::Tokens => cfg.merge_target = v,
            }
            run(format!("{}={v}", param.name()), splits, &cfg)
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentTable { rows })
}

impl ExperimentTable {
    /// Markdown table: overall accuracy, per-modality accuracy and planted
    /// recall for each row.
    pub fn to_markdown(&self) -> String {
        let mut types: Vec<&str> = self
            .rows
            .iter()
            .flat_map(|r| r.report.per_type.keys().map(String::as_str))
            .collect();
        types.sort_unstable();
        types.dedup();
        let mut s = String::from("| run | overall |");
        for t in &types {
            let _ = write!(s, " {t} |");
        }
        s.push_str(" planted recall |\n|---|---|");
        for _ in &types {
            s.push_str("---|");
        }
        s.push_str("---|\n");
        for r in &self.rows {
            let _ = write!(s, "| {} | {:.4} |", r.name, r.report.overall.accuracy);
            for t in &types {
                match r.report.per_type.get(*t) {
                    Some(c) => {
                        let _ = write!(s, " {:.4} |", c.accuracy);
                    }
                    None => s.push_str(" - |"),
                }
            }
            match r.report.planted_recall {
                Some(x) => {
                    let _ = writeln!(s, " {x:.4} |");
                }
                None => s.push_str(" - |\n"),
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_ablation_variants() {
        let v = ablation_variants(&TrainConfig::default());
        assert_eq!(v.len(), 6);
        assert!(v[0].1.ablation.is_empty());
        assert!(v[1..].iter().all(|(_, c)| c.ablation.len() == 1));
    }

    #[test]
    fn sweep_param_names() {
        assert_eq!("top_k".parse::<SweepParam>().unwrap(), SweepParam::TopK);
        assert!("lr".parse::<SweepParam>().is_err());
    }
}
