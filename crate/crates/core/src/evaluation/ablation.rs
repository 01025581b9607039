//! Full model against its five variants, over several seeds.
//!
//! Four trainings per seed cover all six rows: the two inference-only
//! variants reuse the full model's training.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, InferenceMode, ModeAccuracy};
use crate::config::RunConfig;
use crate::data::MultiDomainDataset;
use crate::error::{Error, Result};
use crate::training::{train, AblationFlags};

/// Row labels in table order, each with the training it needs and the
/// inference mode it is scored under.
pub const ABLATION_ROWS: [(&str, TrainingVariant, InferenceMode); 6] = [
    (
        "ML-w/o condition-adv",
        TrainingVariant::NoConditionAdv,
        InferenceMode::Ensemble,
    ),
    ("ML-w/o L_E", TrainingVariant::NoEntropy, InferenceMode::Ensemble),
    ("ML-w/o L_M", TrainingVariant::NoMutual, InferenceMode::Ensemble),
    ("ML-guidance-inf", TrainingVariant::Full, InferenceMode::GuidanceOnly),
    (
        "ML-branch-average-inf",
        TrainingVariant::Full,
        InferenceMode::BranchAverage,
    ),
    ("ML-MSDA (full)", TrainingVariant::Full, InferenceMode::Ensemble),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingVariant {
    Full,
    NoConditionAdv,
    NoEntropy,
    NoMutual,
}

impl TrainingVariant {
    pub const ALL: [TrainingVariant; 4] = [Self::Full, Self::NoConditionAdv, Self::NoEntropy, Self::NoMutual];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoConditionAdv => "no_condition_adv",
            Self::NoEntropy => "no_entropy",
            Self::NoMutual => "no_mutual",
        }
    }

    pub fn flags(self) -> AblationFlags {
        AblationFlags {
            no_condition_adv: self == Self::NoConditionAdv,
            no_entropy: self == Self::NoEntropy,
            no_mutual: self == Self::NoMutual,
            inference_mode: InferenceMode::Ensemble,
        }
    }

    /// `base` with this variant's switches and `seed`.
    pub fn config(self, base: &RunConfig, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            flags: self.flags(),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationJob {
    pub variant: TrainingVariant,
    pub seed: u64,
}

impl AblationJob {
    /// Stable file stem for caching a finished job.
    pub fn key(&self) -> String {
        format!("{}-seed{}", self.variant.as_str(), self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job: AblationJob,
    pub target_accuracy: ModeAccuracy,
    pub config_hash: String,
}

/// Every training needed for `seeds`, seeds outermost.
pub fn ablation_jobs(seeds: &[u64]) -> Vec<AblationJob> {
    seeds
        .iter()
        .flat_map(|&seed| TrainingVariant::ALL.map(|variant| AblationJob { variant, seed }))
        .collect()
}

pub fn run_ablation_job(base: &RunConfig, ds: &MultiDomainDataset, job: AblationJob) -> Result<JobResult> {
    let cfg = job.variant.config(base, job.seed);
    let model = cfg.init_model(ds)?;
    let trained = train(model, ds, &cfg)?.model;
    let hash = cfg.config_hash();
    let report = evaluate(&trained, ds, InferenceMode::Ensemble, job.seed, &hash)?;
    Ok(JobResult {
        job,
        target_accuracy: report.target_accuracy,
        config_hash: hash,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Target accuracy in percent.
    pub mean: f64,
    /// Sample standard deviation in percent; 0 for a single seed.
    pub std: f64,
    pub runs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub config_hash: String,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Tab-separated text, one row per variant.
    pub fn to_tsv(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!(
            "# config_hash={} seeds={}\nvariant\tmean\tstd\truns\n",
            self.config_hash,
            seeds.join(",")
        );
        for r in &self.rows {
            writeln!(out, "{}\t{:.2}\t{:.2}\t{}", r.label, r.mean, r.std, r.runs.len()).expect("write to String");
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Builds the table from finished jobs; every (variant, seed) pair must be present.
pub fn aggregate_ablation(base: &RunConfig, seeds: &[u64], results: &[JobResult]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let lookup = |job: AblationJob| {
        results
            .iter()
            .find(|r| r.job == job)
            .ok_or_else(|| Error::Config(format!("missing ablation result {}", job.key())))
    };
    let rows = ABLATION_ROWS
        .iter()
        .map(|&(label, variant, mode)| {
            let runs = seeds
                .iter()
                .map(|&seed| Ok(100.0 * lookup(AblationJob { variant, seed })?.target_accuracy.get(mode)))
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&runs);
            Ok(AblationRow {
                label: label.to_string(),
                mean,
                std,
                runs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
        config_hash: base.config_hash(),
    })
}

/// Trains every job on the current rayon pool and aggregates.
pub fn run_ablations(base: &RunConfig, ds: &MultiDomainDataset, seeds: &[u64]) -> Result<AblationTable> {
    let jobs = ablation_jobs(seeds);
    let results = jobs
        .par_iter()
        .map(|&job| run_ablation_job(base, ds, job))
        .collect::<Result<Vec<_>>>()?;
    aggregate_ablation(base, seeds, &results)
}
