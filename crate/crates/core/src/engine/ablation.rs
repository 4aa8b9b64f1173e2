use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::EngineConfig;
use super::data::Dataset;
use super::train::{evaluate, train, Quiet};
use crate::metrics::MetricsReport;

/// Column set of the component and fusion tables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationScores {
    pub challenge_iou: f64,
    pub aji: f64,
    pub m_dice: f64,
    /// Dice of the granule class; `None` if no class is named "granules".
    pub dice_gra: Option<f64>,
}

impl AblationScores {
    pub fn from_report(report: &MetricsReport) -> Self {
        Self {
            challenge_iou: report.challenge_iou,
            aji: report.aji,
            m_dice: report.dice,
            dice_gra: report.dice_of("granules"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config_hash: String,
    /// Scores, or the error that stopped the run.
    pub outcome: Result<AblationScores, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn scores(&self, name: &str) -> Option<&AblationScores> {
        self.rows.iter().find(|r| r.name == name)?.outcome.as_ref().ok()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.outcome.is_ok())
    }

    /// Plain-text table with columns C IoU, AJI, m Dice, Dice_gra.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<width$}  {:>7}  {:>7}  {:>7}  {:>8}\n", "setting", "C IoU", "AJI", "m Dice", "Dice_gra");
        for r in &self.rows {
            match &r.outcome {
                Ok(v) => {
                    let gra = v.dice_gra.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
                    s += &format!(
                        "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>8}\n",
                        r.name, v.challenge_iou, v.aji, v.m_dice, gra
                    );
                }
                Err(e) => s += &format!("{:<width$}  failed: {e}\n", r.name),
            }
        }
        s
    }
}

/// Trains and evaluates one model per row. Every row shares the data (and
/// so the embeddings) and its own config's seeds; a failing row is recorded
/// and the table is still produced.
pub fn run_ablation(rows: &[(String, EngineConfig)], train_set: &Dataset, eval_set: &Dataset) -> AblationTable {
    let mut table = AblationTable::default();
    for (name, cfg) in rows {
        let run = || -> crate::Result<AblationScores> {
            cfg.validate()?;
            let (model, _, _) = train(cfg, train_set, &mut Quiet)?;
            Ok(AblationScores::from_report(&evaluate(&model, eval_set)?))
        };
        let outcome = run().map_err(|e| e.to_string());
        if let Err(e) = &outcome {
            log::warn!("ablation row {name} failed: {e}");
        }
        table.rows.push(AblationRow {
            name: name.clone(),
            config_hash: crate::encoder::hex(&cfg.hash()),
            outcome,
        });
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failing_rows_are_recorded() {
        let mut bad = EngineConfig::smoke();
        bad.train.ablation.use_sparse = false;
        bad.train.ablation.use_dense = false;
        let empty = Dataset {
            items: Vec::new(),
            embeddings: Vec::new(),
            fingerprint: None,
        };
        let t = run_ablation(&[("both off".into(), bad), ("empty".into(), EngineConfig::smoke())], &empty, &empty);
        assert_eq!(t.rows.len(), 2);
        assert!(!t.is_complete());
        assert!(t.rows[0].outcome.as_ref().unwrap_err().contains("validation"));
        assert!(t.render().contains("failed"));
    }
}
