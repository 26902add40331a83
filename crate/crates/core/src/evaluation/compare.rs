//! Side-by-side runs of method variants on shared data, seeds and evaluation episodes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;

use crate::backbone::ToyBackbone;
use crate::data::{Dataset, Rotation};
use crate::engine::{evaluate, train, EvalOptions, FeatureBank, TrainConfig, TrainOptions};
use crate::error::{FrinetError, Result};

use super::{exact_mean, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareMode {
    Baseline,
    RotationAug,
    Frinet,
    /// Baseline, rotation augmentation and the full method together.
    MethodAblation,
    OrientationSweep,
}

impl std::str::FromStr for CompareMode {
    type Err = FrinetError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => CompareMode::Baseline,
            "rotation_aug" => CompareMode::RotationAug,
            "frinet" => CompareMode::Frinet,
            "ablation" => CompareMode::MethodAblation,
            "orientation_sweep" | "sweep" => CompareMode::OrientationSweep,
            other => return Err(FrinetError::Config(format!("unknown comparison mode `{other}`"))),
        })
    }
}

/// One variant: a label and the full training config it runs with.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmPlan {
    pub label: String,
    pub config: TrainConfig,
}

fn orientation_label(o: &[Rotation]) -> String {
    let degs: Vec<String> = o.iter().map(|r| r.degrees().to_string()).collect();
    format!("[{}]", degs.join(","))
}

/// Arms for `mode`, all derived from `base`.
pub fn plan_arms(mode: CompareMode, base: &TrainConfig) -> Vec<ArmPlan> {
    let baseline = ArmPlan {
        label: "baseline".into(),
        config: TrainConfig {
            orientations: vec![Rotation::R0],
            mu: 0.0,
            rotation_augment: false,
            ..base.clone()
        },
    };
    let rotation_aug = ArmPlan {
        label: "rotation_aug".into(),
        config: TrainConfig {
            rotation_augment: true,
            ..baseline.config.clone()
        },
    };
    let frinet = ArmPlan {
        label: "frinet".into(),
        config: TrainConfig {
            orientations: Rotation::ALL.to_vec(),
            rotation_augment: false,
            ..base.clone()
        },
    };
    match mode {
        CompareMode::Baseline => vec![baseline],
        CompareMode::RotationAug => vec![rotation_aug],
        CompareMode::Frinet => vec![frinet],
        CompareMode::MethodAblation => vec![baseline, rotation_aug, frinet],
        CompareMode::OrientationSweep => (1..=4)
            .map(|n| {
                let orientations = Rotation::ALL[..n].to_vec();
                ArmPlan {
                    label: orientation_label(&orientations),
                    config: TrainConfig {
                        orientations,
                        rotation_augment: false,
                        ..base.clone()
                    },
                }
            })
            .collect(),
    }
}

/// Arms may differ only in orientations, mu and rotation augmentation.
pub fn validate_arms(arms: &[ArmPlan]) -> Result<()> {
    let Some(first) = arms.first() else {
        return Ok(());
    };
    let c0 = &first.config;
    for arm in &arms[1..] {
        let c = &arm.config;
        if c.seed != c0.seed {
            return Err(FrinetError::MismatchedArms("seed"));
        }
        if c.fold != c0.fold {
            return Err(FrinetError::MismatchedArms("fold"));
        }
        if c.shots != c0.shots {
            return Err(FrinetError::MismatchedArms("shots"));
        }
        let neutral = |c: &TrainConfig| TrainConfig {
            orientations: vec![Rotation::R0],
            mu: 0.0,
            rotation_augment: false,
            ..c.clone()
        };
        if neutral(c) != neutral(c0) {
            return Err(FrinetError::MismatchedArms("training schedule"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub label: String,
    pub fold: usize,
    pub seed: u64,
    pub report: EvalReport,
    pub final_loss: Option<f64>,
}

/// Meta-training and meta-test data; they may be the same collection.
#[derive(Debug, Clone, Copy)]
pub struct HarnessData<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

/// Feature caches for the two collections.
#[derive(Debug, Default)]
pub struct HarnessBanks {
    pub train: FeatureBank,
    pub test: FeatureBank,
}

/// Trains and evaluates every arm with one backbone and one evaluation episode list.
pub fn run_arms(
    data: HarnessData<'_>,
    backbone: &ToyBackbone<f32>,
    arms: &[ArmPlan],
    eval: &EvalOptions,
    banks: &mut HarnessBanks,
) -> Result<Vec<ArmResult>> {
    validate_arms(arms)?;
    let mut results: Vec<ArmResult> = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut opts = TrainOptions {
            bank: std::mem::take(&mut banks.train),
            ..TrainOptions::default()
        };
        let outcome = train(
            data.train,
            data.train.split(arm.config.fold)?,
            &arm.config,
            backbone,
            &mut opts,
        );
        banks.train = std::mem::take(&mut opts.bank);
        let outcome = outcome?;
        let split = data.test.split(arm.config.fold)?;
        let report = evaluate(
            data.test,
            split,
            &arm.config,
            &outcome.model,
            backbone,
            &mut banks.test,
            eval,
            None,
        )?;
        info!(
            "arm {} fold {} seed {}: mIoU {:.2}",
            arm.label,
            arm.config.fold,
            arm.config.seed,
            report.miou_percent()
        );
        if let Some(prev) = results.first() {
            if prev.report.episode_digest != report.episode_digest {
                return Err(FrinetError::MismatchedArms("evaluation episodes"));
            }
        }
        results.push(ArmResult {
            label: arm.label.clone(),
            fold: arm.config.fold,
            seed: arm.config.seed,
            report,
            final_loss: outcome.epoch_losses.last().copied(),
        });
    }
    Ok(results)
}

/// Folds, seeds and evaluation settings shared by every arm.
#[derive(Debug, Clone)]
pub struct SharedSetup {
    pub base: TrainConfig,
    pub folds: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eval: EvalOptions,
}

#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub label: String,
    pub orientations: Vec<Rotation>,
    pub mu: f64,
    pub rotation_augment: bool,
    /// Mean mIoU over seeds, per fold.
    pub per_fold: BTreeMap<usize, f64>,
    /// Mean over all folds and seeds.
    pub mean_miou: f64,
    /// Spread over seeds of the fold-averaged mIoU.
    pub std_miou: f64,
    pub runs: Vec<ArmResult>,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aggregates runs per arm label, in `arms` order.
    pub fn from_runs(arms: &[ArmPlan], runs: Vec<ArmResult>) -> Self {
        let rows = arms
            .iter()
            .map(|arm| {
                let mine: Vec<ArmResult> = runs.iter().filter(|r| r.label == arm.label).cloned().collect();
                let mut by_fold: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
                for r in &mine {
                    by_fold.entry(r.fold).or_default().push(r.report.miou);
                    by_seed.entry(r.seed).or_default().push(r.report.miou);
                }
                let seed_means: Vec<f64> = by_seed.values().map(|v| exact_mean(v)).collect();
                let mean = exact_mean(&mine.iter().map(|r| r.report.miou).collect::<Vec<_>>());
                let m = exact_mean(&seed_means);
                let var = seed_means.iter().map(|s| (s - m).powi(2)).sum::<f64>() / seed_means.len().max(1) as f64;
                ComparisonRow {
                    label: arm.label.clone(),
                    orientations: arm.config.orientations.clone(),
                    mu: arm.config.mu,
                    rotation_augment: arm.config.rotation_augment,
                    per_fold: by_fold.into_iter().map(|(f, v)| (f, exact_mean(&v))).collect(),
                    mean_miou: mean,
                    std_miou: var.sqrt(),
                    runs: mine,
                }
            })
            .collect();
        ComparisonReport { rows }
    }

    /// Markdown table, mIoU in percentage points.
    pub fn to_markdown(&self) -> String {
        let folds: Vec<usize> = self
            .rows
            .first()
            .map(|r| r.per_fold.keys().copied().collect())
            .unwrap_or_default();
        let mut s = String::from("| arm | orientations | mu | rot. aug |");
        for f in &folds {
            let _ = write!(s, " fold {f} |");
        }
        s.push_str(" mean | std |\n|---|---|---|---|");
        for _ in &folds {
            s.push_str("---|");
        }
        s.push_str("---|---|\n");
        for r in &self.rows {
            let _ = write!(
                s,
                "| {} | {} | {} | {} |",
                r.label,
                orientation_label(&r.orientations),
                r.mu,
                if r.rotation_augment { "yes" } else { "no" }
            );
            for f in &folds {
                let _ = write!(s, " {:.2} |", 100.0 * r.per_fold.get(f).copied().unwrap_or(f64::NAN));
            }
            let _ = writeln!(s, " {:.2} | {:.2} |", 100.0 * r.mean_miou, 100.0 * r.std_miou);
        }
        s
    }

    /// One line per run plus one summary line per arm (`fold = mean`).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,orientations,mu,rotation_augment,fold,seed,miou\n");
        for r in &self.rows {
            let o = orientation_label(&r.orientations).replace(',', " ");
            for run in &r.runs {
                let _ = writeln!(
                    s,
                    "{},{o},{},{},{},{},{:.6}",
                    r.label, r.mu, r.rotation_augment, run.fold, run.seed, run.report.miou
                );
            }
            let _ = writeln!(
                s,
                "{},{o},{},{},mean,all,{:.6}",
                r.label, r.mu, r.rotation_augment, r.mean_miou
            );
        }
        s
    }
}

/// Runs `mode` over every fold and seed in `shared`. `backbone_for` supplies the frozen extractor per fold.
pub fn compare_harness<'b>(
    mode: CompareMode,
    data: HarnessData<'_>,
    shared: &SharedSetup,
    mut backbone_for: impl FnMut(usize) -> Result<&'b ToyBackbone<f32>>,
) -> Result<ComparisonReport> {
    let arms = plan_arms(mode, &shared.base);
    let mut runs = Vec::new();
    for &fold in &shared.folds {
        let backbone = backbone_for(fold)?;
        let mut banks = HarnessBanks::default();
        for &seed in &shared.seeds {
            let seeded: Vec<ArmPlan> = arms
                .iter()
                .map(|a| ArmPlan {
                    label: a.label.clone(),
                    config: TrainConfig {
                        seed,
                        fold,
                        ..a.config.clone()
                    },
                })
                .collect();
            runs.extend(run_arms(data, backbone, &seeded, &shared.eval, &mut banks)?);
        }
    }
    Ok(ComparisonReport::from_runs(&arms, runs))
}
