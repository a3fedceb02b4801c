//! Hyperparameter and loss-toggle grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossTerms, LossWeights};

use super::TrainConfig;

/// Values swept for each loss weight.
pub const WEIGHT_GRID: [f64; 4] = [0.01, 0.1, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha1,
    Alpha2,
    Alpha3,
    /// Loss-term ablation variants; values are ignored.
    Terms,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha1" => Ok(SweepParam::Alpha1),
            "alpha2" => Ok(SweepParam::Alpha2),
            "alpha3" => Ok(SweepParam::Alpha3),
            "terms" | "loss" => Ok(SweepParam::Terms),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep parameter '{other}' (alpha1, alpha2, alpha3, terms)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    /// Directory-safe name.
    pub label: String,
    pub config: TrainConfig,
    /// True for the cell that uses the default weights and all terms.
    pub is_default: bool,
}

fn weight_label(w: &LossWeights) -> String {
    format!("a1_{}_a2_{}_a3_{}", w.alpha1, w.alpha2, w.alpha3)
}

/// Cells of one sweep. Weight sweeps vary one weight with the other two at
/// 1, then append the default-weight cell for reference. The terms sweep
/// lists cumulative loss combinations and the two constraint removals.
pub fn sweep_cells(base: &TrainConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepCell>> {
    let with = |weights: LossWeights, terms: LossTerms| TrainConfig {
        weights,
        terms,
        ..base.clone()
    };
    let default_cell = SweepCell {
        label: format!("default_{}", weight_label(&LossWeights::default())),
        config: with(LossWeights::default(), LossTerms::default()),
        is_default: true,
    };
    let mut cells = Vec::new();
    match param {
        SweepParam::Terms => {
            let all = LossTerms::default();
            let variants = [
                ("image", LossTerms::only_image()),
                (
                    "image_motion",
                    LossTerms {
                        cycle: false,
                        reg: false,
                        ..all
                    },
                ),
                ("image_motion_cycle", LossTerms { reg: false, ..all }),
                (
                    "no_coordinate",
                    LossTerms {
                        coordinate_constraint: false,
                        ..all
                    },
                ),
                (
                    "no_intensity",
                    LossTerms {
                        intensity_constraint: false,
                        ..all
                    },
                ),
            ];
            for (label, terms) in variants {
                cells.push(SweepCell {
                    label: label.into(),
                    config: with(LossWeights::default(), terms),
                    is_default: false,
                });
            }
            cells.insert(3, SweepCell {
                label: "all".into(),
                ..default_cell
            });
        }
        _ => {
            if values.is_empty() {
                return Err(Error::InvalidConfig("sweep needs at least one value".into()));
            }
            for &v in values {
                let mut w = LossWeights {
                    alpha1: 1.0,
                    alpha2: 1.0,
                    alpha3: 1.0,
                };
                match param {
                    SweepParam::Alpha1 => w.alpha1 = v,
                    SweepParam::Alpha2 => w.alpha2 = v,
                    _ => w.alpha3 = v,
                }
                w.validate()?;
                cells.push(SweepCell {
                    label: weight_label(&w),
                    config: with(w, LossTerms::default()),
                    is_default: w == LossWeights::default(),
                });
            }
            if !cells.iter().any(|c| c.is_default) {
                cells.push(default_cell);
            }
        }
    }
    Ok(cells)
}

/// Rank (0 = best) of the default cell by ascending score.
pub fn default_rank(cells: &[SweepCell], scores: &[f64]) -> Option<usize> {
    let d = cells.iter().position(|c| c.is_default)?;
    Some(scores.iter().filter(|&&s| s < scores[d]).count())
}
