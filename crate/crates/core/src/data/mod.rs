//! Multi-domain datasets: synthetic generation, file format and sampling.

mod format;
mod ring;
mod sampler;

pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_VERSION};
pub use ring::{generate_ring_domains, ring_center, DomainSpec, RingBenchmark};
pub use sampler::{Batch, CombinedSampling, Sampler, StepBatch};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Features with labels, `x` is `[n × input_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Features only.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSplit {
    pub x: Tensor,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        Batch {
            x: gather_rows(&self.x, indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

impl FeatureSplit {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn gather_rows(x: &Tensor, indices: &[usize]) -> Tensor {
    let cols = x.shape()[1];
    let data = indices.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::matrix(indices.len(), cols, data).expect("gathered rows are consistent")
}

/// Stacks row-compatible matrices vertically.
pub(crate) fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let cols = parts.first().map_or(0, |t| t.shape()[1]);
    let rows = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::matrix(rows, cols, data).expect("parts share a width")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDomain {
    pub spec: DomainSpec,
    pub train: LabeledSplit,
    pub test: LabeledSplit,
}

/// The unlabeled domain. Training features carry no labels at all; the
/// labeled test split is for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDomain {
    pub spec: DomainSpec,
    pub train: FeatureSplit,
    pub test: LabeledSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    pub num_classes: usize,
    pub input_dim: usize,
    pub sources: Vec<SourceDomain>,
    pub target: TargetDomain,
}

/// What the training loop may see.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub num_classes: usize,
    pub input_dim: usize,
    pub sources: &'a [SourceDomain],
    pub target: &'a FeatureSplit,
}

impl MultiDomainDataset {
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            num_classes: self.num_classes,
            input_dim: self.input_dim,
            sources: &self.sources,
            target: &self.target.train,
        }
    }

    /// Union of all source test splits, in domain order.
    pub fn combined_source_test(&self) -> LabeledSplit {
        let xs: Vec<&Tensor> = self.sources.iter().map(|s| &s.test.x).collect();
        LabeledSplit {
            x: concat_rows(&xs),
            y: self.sources.iter().flat_map(|s| s.test.y.iter().copied()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("dataset needs at least one source domain".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("class count {} < 2", self.num_classes)));
        }
        let specs = self
            .sources
            .iter()
            .map(|s| &s.spec)
            .chain(std::iter::once(&self.target.spec));
        for spec in specs {
            if spec.class_count != self.num_classes {
                return Err(Error::Incompatible(format!(
                    "domain {} has {} classes, dataset has {}",
                    spec.name, spec.class_count, self.num_classes
                )));
            }
        }
        let labeled = self
            .sources
            .iter()
            .flat_map(|s| [&s.train, &s.test])
            .chain(std::iter::once(&self.target.test));
        for split in labeled {
            check_split(&split.x, self.input_dim)?;
            if split.x.shape()[0] != split.y.len() {
                return Err(Error::Malformed("feature/label count mismatch".into()));
            }
            if let Some(bad) = split.y.iter().find(|&&y| y >= self.num_classes) {
                return Err(Error::Label(format!("label {bad} >= {}", self.num_classes)));
            }
        }
        check_split(&self.target.train.x, self.input_dim)
    }
}

fn check_split(x: &Tensor, input_dim: usize) -> Result<()> {
    let (_, cols) = x.dims2()?;
    if cols != input_dim {
        return Err(Error::Incompatible(format!(
            "feature width {cols}, expected {input_dim}"
        )));
    }
    if !x.all_finite() {
        return Err(Error::Malformed("non-finite feature".into()));
    }
    Ok(())
}
