//! Ablation variants and the table comparing them on the target domain.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_model, pose_consistency, EvalReport, ProbeSpec};
use crate::networks::Model;
use crate::trainer::{train, Ablation, NullSink, RunDirSink, TrainConfig, TrainSink, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Triplet loss on the source only.
    Baseline,
    /// Triplet plus MMD.
    PlusMmd,
    NoRec,
    NoPose,
    NoSharedDp,
    NoDomainAdv,
    NoMmd,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::PlusMmd,
        Variant::NoRec,
        Variant::NoPose,
        Variant::NoSharedDp,
        Variant::NoDomainAdv,
        Variant::NoMmd,
        Variant::Full,
    ];

    /// Name used on the command line and for run subdirectories.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PlusMmd => "plus-mmd",
            Variant::NoRec => "no-rec",
            Variant::NoPose => "no-pose",
            Variant::NoSharedDp => "no-shared-dp",
            Variant::NoDomainAdv => "no-domain-adv",
            Variant::NoMmd => "no-mmd",
            Variant::Full => "full",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline (triplet)",
            Variant::PlusMmd => "+ L_MMD",
            Variant::NoRec => "w/o L_rec",
            Variant::NoPose => "w/o L_pose",
            Variant::NoSharedDp => "w/o shared D_P",
            Variant::NoDomainAdv => "w/o L_domain",
            Variant::NoMmd => "w/o L_MMD",
            Variant::Full => "Full model",
        }
    }

    pub fn ablation(self) -> Ablation {
        let full = Ablation::default();
        match self {
            Variant::Baseline => {
                Ablation { use_mmd: false, use_rec: false, use_pose: false, use_domain_adv: false, ..full }
            }
            Variant::PlusMmd => Ablation { use_rec: false, use_pose: false, use_domain_adv: false, ..full },
            Variant::NoRec => Ablation { use_rec: false, ..full },
            Variant::NoPose => Ablation { use_pose: false, ..full },
            Variant::NoSharedDp => Ablation { share_dp: false, ..full },
            Variant::NoDomainAdv => Ablation { use_domain_adv: false, ..full },
            Variant::NoMmd => Ablation { use_mmd: false, ..full },
            Variant::Full => full,
        }
    }

    /// `base` with this variant's switches; everything else, seed included,
    /// is shared.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        TrainConfig { ablation: self.ablation(), ..base.clone() }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.slug() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.slug()).collect();
            Error::invalid(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Target-domain results of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub report: EvalReport,
    pub pose_consistency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// The error message when training or evaluation failed.
    pub outcome: std::result::Result<VariantResult, String>,
}

/// Evaluates a model on the target domain.
pub fn assess(model: &Model, data: &Dataset, probes: &ProbeSpec) -> Result<VariantResult> {
    Ok(VariantResult { report: evaluate_model(model, &data.target)?, pose_consistency: pose_consistency(model, data, probes)? })
}

/// Trains `variant` from the shared base config and assesses it.
pub fn run_variant(
    base: &TrainConfig,
    data: &Dataset,
    variant: Variant,
    probes: &ProbeSpec,
    sink: &mut dyn TrainSink,
) -> Result<VariantResult> {
    let cfg = variant.config(base);
    let out = train(&cfg, data, None, sink)?;
    assess(&Model::new(cfg.net, out.state.params), data, probes)
}

/// The untrained network of `base`: a random-feature reference point.
pub fn random_features(base: &TrainConfig, data: &Dataset, probes: &ProbeSpec) -> Result<VariantResult> {
    let state = TrainState::init(base)?;
    assess(&Model::new(base.net.clone(), state.params), data, probes)
}

/// Runs every variant in order. With `run_dir`, each variant writes its run
/// into a subdirectory named after its slug. A failing variant is recorded
/// and the rest still run.
pub fn run_ablation(base: &TrainConfig, data: &Dataset, variants: &[Variant], probes: &ProbeSpec, run_dir: Option<&Path>) -> Vec<AblationRow> {
    variants
        .iter()
        .map(|&variant| {
            log::info!("ablation variant {variant}");
            let outcome = match run_dir {
                Some(dir) => run_variant(base, data, variant, probes, &mut RunDirSink::new(dir.join(variant.slug()))),
                None => run_variant(base, data, variant, probes, &mut NullSink),
            };
            if let Err(e) = &outcome {
                log::warn!("variant {variant} failed: {e}");
            }
            AblationRow { variant, outcome: outcome.map_err(|e| e.to_string()) }
        })
        .collect()
}

/// Aligned text table: Rank-1/5/10, mAP and pose consistency in percent.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.label().len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>6}  {:>7}  {:>6}  {:>9}\n",
        "method", "Rank-1", "Rank-5", "Rank-10", "mAP", "pose-cons"
    );
    for row in rows {
        let label = row.variant.label();
        match &row.outcome {
            Ok(r) => {
                let pct = |v: f64| format!("{:.1}", 100.0 * v);
                let _ = writeln!(
                    out,
                    "{label:<width$}  {:>6}  {:>6}  {:>7}  {:>6}  {:>9}",
                    pct(r.report.rank1),
                    pct(r.report.rank5),
                    pct(r.report.rank10),
                    pct(r.report.map),
                    pct(r.pose_consistency)
                );
            }
            Err(e) => {
                let _ = writeln!(out, "{label:<width$}  failed: {e}");
            }
        }
    }
    out
}
