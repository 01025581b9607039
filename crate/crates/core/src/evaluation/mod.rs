//! Inference, accuracy bookkeeping, alignment diagnostics and the ablation runner.

mod ablation;
mod dump;
mod probe;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ablation::{
    ablation_jobs, aggregate_ablation, run_ablation_job, run_ablations, AblationJob, AblationRow, AblationTable,
    JobResult, TrainingVariant, ABLATION_ROWS,
};
pub use dump::{dump_features, write_feature_dump};
pub use probe::{probe_accuracy, probe_discriminator, PROBE_MIN_SAMPLES};

use crate::autodiff::{Tape, Tensor};
use crate::data::{gather_rows, LabeledSplit, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::model::{condition, MlMsdaModel};

/// How target predictions are formed from the N+1 subnetworks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// `½(guidance + mean of branches)`.
    #[default]
    Ensemble,
    GuidanceOnly,
    BranchAverage,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [Self::Ensemble, Self::GuidanceOnly, Self::BranchAverage];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ensemble => "ensemble",
            Self::GuidanceOnly => "guidance_only",
            Self::BranchAverage => "branch_average",
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown inference mode {s:?} (ensemble, guidance_only, branch_average)"
            ))
        })
    }
}

/// Ensemble output together with the parts it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub probs: Tensor,
    pub branch_probs: Vec<Tensor>,
    pub guidance_probs: Tensor,
}

impl EnsemblePrediction {
    pub fn classes(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

/// Row-wise mean of the branch distributions.
pub fn branch_average(branch_preds: &[Tensor]) -> Result<Tensor> {
    let first = branch_preds
        .first()
        .ok_or_else(|| Error::shape("branch_average", "no branch predictions"))?;
    let mut out = Tensor::zeros(first.shape());
    for p in branch_preds {
        if p.shape() != first.shape() {
            return Err(Error::shape(
                "branch_average",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        out.data_mut().iter_mut().zip(p.data()).for_each(|(o, v)| *o += v);
    }
    let n = branch_preds.len() as f64;
    Ok(out.map(|v| v / n))
}

pub fn ensemble_predict(branch_preds: &[Tensor], guidance_pred: &Tensor) -> Result<EnsemblePrediction> {
    let avg = branch_average(branch_preds)?;
    if avg.shape() != guidance_pred.shape() {
        return Err(Error::shape(
            "ensemble_predict",
            format!("branches {:?} vs guidance {:?}", avg.shape(), guidance_pred.shape()),
        ));
    }
    let data = avg
        .data()
        .iter()
        .zip(guidance_pred.data())
        .map(|(b, g)| 0.5 * (g + b))
        .collect();
    Ok(EnsemblePrediction {
        probs: Tensor::new(avg.shape().to_vec(), data)?,
        branch_probs: branch_preds.to_vec(),
        guidance_probs: guidance_pred.clone(),
    })
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let k = probs.shape().last().copied().unwrap_or(0);
    if k == 0 {
        return Vec::new();
    }
    probs
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDomain("no labeled samples to score".into()));
    }
    if predicted.len() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions for {} labels", predicted.len(), labels.len()),
        ));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Class distributions of every subnetwork on `x`, in subnetwork order.
pub fn subnet_predictions(model: &MlMsdaModel, x: &Tensor) -> Result<Vec<Tensor>> {
    (0..model.subnet_count()).map(|j| model.predict(j, x)).collect()
}

/// Combines per-subnetwork predictions (branches first, guidance last).
pub fn combine(per_subnet: &[Tensor], mode: InferenceMode) -> Result<Tensor> {
    let (guidance, branches) = per_subnet
        .split_last()
        .ok_or_else(|| Error::shape("combine", "no predictions"))?;
    match mode {
        InferenceMode::Ensemble => Ok(ensemble_predict(branches, guidance)?.probs),
        InferenceMode::GuidanceOnly => Ok(guidance.clone()),
        InferenceMode::BranchAverage => branch_average(branches),
    }
}

pub fn predict(model: &MlMsdaModel, x: &Tensor, mode: InferenceMode) -> Result<Tensor> {
    combine(&subnet_predictions(model, x)?, mode)
}

/// Target accuracy under each inference mode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeAccuracy {
    pub ensemble: f64,
    pub guidance_only: f64,
    pub branch_average: f64,
}

impl ModeAccuracy {
    pub fn get(&self, mode: InferenceMode) -> f64 {
        match mode {
            InferenceMode::Ensemble => self.ensemble,
            InferenceMode::GuidanceOnly => self.guidance_only,
            InferenceMode::BranchAverage => self.branch_average,
        }
    }
}

/// Checks that a model can be run on a dataset (same K, input width and source count).
pub fn check_compatible(model: &MlMsdaModel, ds: &MultiDomainDataset) -> Result<()> {
    let cfg = model.config();
    let pairs = [
        ("class count", cfg.num_classes, ds.num_classes),
        ("input_dim", cfg.input_dim, ds.input_dim),
        ("source count", cfg.num_sources, ds.num_sources()),
    ];
    for (what, m, d) in pairs {
        if m != d {
            return Err(Error::Incompatible(format!("model {what} {m}, dataset {what} {d}")));
        }
    }
    Ok(())
}

/// Source test split matching subnetwork `j`: its own domain for a branch,
/// the union of all sources for the guidance network.
pub fn source_test_for(ds: &MultiDomainDataset, j: usize) -> LabeledSplit {
    if j < ds.num_sources() {
        ds.sources[j].test.clone()
    } else {
        ds.combined_source_test()
    }
}

/// Accuracy-type measurements shared by per-epoch metrics and reports.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub target_accuracy: ModeAccuracy,
    pub subnet_target_accuracy: Vec<f64>,
    pub source_accuracy: Vec<f64>,
    pub discriminator_accuracy: Vec<f64>,
}

pub fn snapshot(model: &MlMsdaModel, ds: &MultiDomainDataset) -> Result<Snapshot> {
    check_compatible(model, ds)?;
    let target = &ds.target.test;
    let per_subnet = subnet_predictions(model, &target.x)?;
    let mode_acc = |mode| accuracy(&argmax_rows(&combine(&per_subnet, mode)?), &target.y);
    let target_accuracy = ModeAccuracy {
        ensemble: mode_acc(InferenceMode::Ensemble)?,
        guidance_only: mode_acc(InferenceMode::GuidanceOnly)?,
        branch_average: mode_acc(InferenceMode::BranchAverage)?,
    };
    let subnet_target_accuracy = per_subnet
        .iter()
        .map(|p| accuracy(&argmax_rows(p), &target.y))
        .collect::<Result<_>>()?;
    let source_accuracy = (0..model.subnet_count())
        .map(|j| {
            let split = source_test_for(ds, j);
            accuracy(&argmax_rows(&model.predict(j, &split.x)?), &split.y)
        })
        .collect::<Result<_>>()?;
    let discriminator_accuracy = (0..model.subnet_count())
        .map(|j| discriminator_accuracy(model, ds, j))
        .collect::<Result<_>>()?;
    Ok(Snapshot {
        target_accuracy,
        subnet_target_accuracy,
        source_accuracy,
        discriminator_accuracy,
    })
}

/// Discriminator outputs of subnetwork `j` on a batch, `[b x 1]`.
pub fn discriminator_outputs(model: &MlMsdaModel, j: usize, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let g = model.bind_frozen(&tape);
    let f = g.extract(j, &tape.constant(x.clone()))?;
    let input = if model.config().conditional_discriminator {
        condition(&f, &g.classify(j, &f)?, true)?
    } else {
        f
    };
    Ok(g.discriminate(j, &input, 1.0)?.to_tensor())
}

/// Accuracy of `D_j` at threshold ½ on a balanced batch of source test rows
/// (label 1) and target test rows (label 0).
pub fn discriminator_accuracy(model: &MlMsdaModel, ds: &MultiDomainDataset, j: usize) -> Result<f64> {
    let source = source_test_for(ds, j);
    let n = source.len().min(ds.target.test.len());
    if n == 0 {
        return Err(Error::EmptyDomain("no test rows for the discriminator batch".into()));
    }
    let first: Vec<usize> = (0..n).collect();
    let d_src = discriminator_outputs(model, j, &gather_rows(&source.x, &first))?;
    let d_tgt = discriminator_outputs(model, j, &gather_rows(&ds.target.test.x, &first))?;
    let hits = d_src.data().iter().filter(|&&d| d > 0.5).count() + d_tgt.data().iter().filter(|&&d| d <= 0.5).count();
    Ok(hits as f64 / (2 * n) as f64)
}

/// Everything `eval` reports for one model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: InferenceMode,
    /// Target test accuracy under `mode`.
    pub accuracy: f64,
    pub target_accuracy: ModeAccuracy,
    pub subnet_target_accuracy: Vec<f64>,
    pub source_accuracy: Vec<f64>,
    pub discriminator_accuracy: Vec<f64>,
    pub probe_accuracy: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
}

pub fn evaluate(
    model: &MlMsdaModel,
    ds: &MultiDomainDataset,
    mode: InferenceMode,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    if ds.target.test.is_empty() {
        return Err(Error::EmptyDomain("target test split".into()));
    }
    let snap = snapshot(model, ds)?;
    Ok(EvalReport {
        mode,
        accuracy: snap.target_accuracy.get(mode),
        target_accuracy: snap.target_accuracy,
        subnet_target_accuracy: snap.subnet_target_accuracy,
        source_accuracy: snap.source_accuracy,
        discriminator_accuracy: snap.discriminator_accuracy,
        probe_accuracy: probe_discriminator(model, ds, seed)?,
        seed,
        config_hash: config_hash.to_string(),
    })
}
