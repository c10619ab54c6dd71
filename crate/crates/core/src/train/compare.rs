use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::samples::{attach_priors, PriorProvider, PriorSettings};
use super::stage2::{evaluate, train_stage2};
use crate::data::PreparedSample;
use crate::detect::{DegradationSpec, DetectorThresholds};
use crate::domain::ToothKind;
use crate::error::{Error, Result};
use crate::model::{NetworkConfig, Variant};

/// Prepared splits shared by every arm of an experiment.
pub struct ExperimentData {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

/// One model configuration in a comparison: the baseline, or the gated
/// network with oracle priors thinned by `drop_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub variant: Variant,
    pub drop_rate: Option<f64>,
}

impl Arm {
    pub fn baseline() -> Self {
        Arm {
            label: "unet".into(),
            variant: Variant::UNet,
            drop_rate: None,
        }
    }

    pub fn gated(drop_rate: f64) -> Self {
        Arm {
            label: format!("oralbbnet-drop{drop_rate:.2}"),
            variant: Variant::OralBbNet,
            drop_rate: Some(drop_rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub label: String,
    pub seed: u64,
    pub dice_overall: Option<f64>,
    /// Incisor, canine, premolar, molar.
    pub dice_by_kind: [Option<f64>; 4],
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub runs: Vec<SeedResult>,
    pub median_dice_overall: Option<f64>,
    pub median_dice_by_kind: [Option<f64>; 4],
}

/// Model x tooth-kind Dice, medians over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<ArmSummary>,
}

/// Median of the defined values; `None` when there are none.
pub fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

impl ComparisonTable {
    pub fn row(&self, label: &str) -> Option<&ArmSummary> {
        self.rows.iter().find(|r| r.arm.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,drop_rate");
        for k in ToothKind::ALL {
            let _ = write!(s, ",{}", k.name());
        }
        s.push_str(",overall");
        for seed in &self.seeds {
            let _ = write!(s, ",overall_seed{seed}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.arm.label, r.arm.drop_rate.map_or("NA".into(), |d| format!("{d:.2}")));
            for v in r.median_dice_by_kind {
                let _ = write!(s, ",{}", fmt_opt(v));
            }
            let _ = write!(s, ",{}", fmt_opt(r.median_dice_overall));
            for run in &r.runs {
                let _ = write!(s, ",{}", fmt_opt(run.dice_overall));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            context: "comparison table".into(),
            source: e,
        })
    }
}

/// Trains and tests one arm with one seed. Degraded priors are applied to
/// every split, keyed by the run seed.
pub fn run_arm(
    data: &ExperimentData,
    arm: &Arm,
    seed: u64,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    thresholds: &DetectorThresholds,
) -> Result<SeedResult> {
    let net_cfg = NetworkConfig {
        variant: arm.variant,
        ..*net_cfg
    };
    let train_cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let (provider, settings) = match arm.drop_rate {
        Some(rate) if net_cfg.is_gated() => (
            PriorProvider::Oracle,
            PriorSettings {
                thresholds: *thresholds,
                degradation: DegradationSpec::dropping(rate, seed),
            },
        ),
        _ => (PriorProvider::None, PriorSettings::default()),
    };
    let train = attach_priors(data.train.clone(), &provider, &settings)?;
    let val = attach_priors(data.val.clone(), &provider, &settings)?;
    let test = attach_priors(data.test.clone(), &provider, &settings)?;
    let outcome = train_stage2(&train, &val, &net_cfg, &train_cfg)?;
    let eval = evaluate(&outcome.best, &test, thresholds, 0)?;
    let seg = &eval.report.segmentation;
    Ok(SeedResult {
        label: arm.label.clone(),
        seed,
        dice_overall: seg.dice_overall,
        dice_by_kind: ToothKind::ALL.map(|k| seg.dice_by_kind.get(k.name()).copied().flatten()),
        map: eval.report.detection.map,
        ap50: eval.report.detection.ap50,
        best_epoch: outcome.best_epoch,
    })
}

/// Runs every arm for every seed under identical budgets and summarizes the
/// test Dice by median over seeds. `progress` sees each finished run.
pub fn run_arms(
    data: &ExperimentData,
    arms: &[Arm],
    seeds: &[u64],
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    thresholds: &DetectorThresholds,
    mut progress: impl FnMut(&SeedResult),
) -> Result<ComparisonTable> {
    if seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let r = run_arm(data, arm, seed, net_cfg, train_cfg, thresholds)?;
            info!("{} seed {seed}: test dice {}", arm.label, fmt_opt(r.dice_overall));
            progress(&r);
            runs.push(r);
        }
        let overall: Vec<Option<f64>> = runs.iter().map(|r| r.dice_overall).collect();
        let by_kind = [0, 1, 2, 3].map(|k| median(&runs.iter().map(|r| r.dice_by_kind[k]).collect::<Vec<_>>()));
        rows.push(ArmSummary {
            arm: arm.clone(),
            median_dice_overall: median(&overall),
            median_dice_by_kind: by_kind,
            runs,
        });
    }
    Ok(ComparisonTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Baseline U-Net against the gated network at each prior drop rate.
pub fn compare_models(
    data: &ExperimentData,
    seeds: &[u64],
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    drop_rates: &[f64],
    thresholds: &DetectorThresholds,
    progress: impl FnMut(&SeedResult),
) -> Result<ComparisonTable> {
    let mut arms = vec![Arm::baseline()];
    arms.extend(drop_rates.iter().map(|&r| Arm::gated(r)));
    run_arms(data, &arms, seeds, net_cfg, train_cfg, thresholds, progress)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_skips_undefined() {
        assert_eq!(median(&[Some(3.0), None, Some(1.0), Some(2.0)]), Some(2.0));
        assert_eq!(median(&[Some(4.0), Some(1.0)]), Some(2.5));
        assert_eq!(median(&[None]), None);
    }

    #[test]
    fn arm_labels() {
        assert_eq!(Arm::gated(0.5).label, "oralbbnet-drop0.50");
        assert_eq!(Arm::baseline().variant, Variant::UNet);
    }
}
