use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gather_rows, TrainView};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinedSampling {
    /// Uniform over the concatenated source pool, so domains contribute in
    /// proportion to their size.
    #[default]
    Proportional,
    /// Round-robin over domains, each slot drawn from that domain.
    Equal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Everything one training step consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    /// One batch per source domain, in domain order.
    pub branches: Vec<Batch>,
    /// Drawn from the union of all sources; feeds the guidance network.
    pub combined: Batch,
    /// Positions in the concatenated source pool of the combined rows.
    pub combined_ids: Vec<usize>,
    /// Shared by every subnetwork.
    pub target: Tensor,
}

/// Epoch-wise permutation that reshuffles itself when exhausted.
#[derive(Debug, Clone)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.order.len() - self.pos
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n).map(|_| self.next(rng)).collect()
    }
}

fn locate(offsets: &[usize], pool_index: usize) -> (usize, usize) {
    let domain = offsets.partition_point(|&o| o <= pool_index) - 1;
    (domain, pool_index - offsets[domain])
}

/// Draws per-step batches. An epoch is one pass over the combined source
/// pool, `ceil(Σ n_s / batch_size)` steps, the last possibly short.
#[derive(Debug, Clone)]
pub struct Sampler {
    batch_size: usize,
    mode: CombinedSampling,
    rng: ChaCha8Rng,
    branch: Vec<Cursor>,
    /// Per-domain cursors for [`CombinedSampling::Equal`].
    equal: Vec<Cursor>,
    combined: Cursor,
    target: Cursor,
    offsets: Vec<usize>,
    pool_size: usize,
    epoch: usize,
    step_in_epoch: usize,
    next_domain: usize,
}

impl Sampler {
    pub fn new(view: &TrainView<'_>, batch_size: usize, mode: CombinedSampling, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if view.sources.is_empty() {
            return Err(Error::EmptyDomain("no source domains".into()));
        }
        for s in view.sources {
            if s.train.is_empty() {
                return Err(Error::EmptyDomain(s.spec.name.clone()));
            }
            if s.train.len() < batch_size {
                return Err(Error::Config(format!(
                    "batch_size {batch_size} exceeds {} training samples of {}",
                    s.train.len(),
                    s.spec.name
                )));
            }
        }
        if view.target.is_empty() {
            return Err(Error::EmptyDomain("target".into()));
        }
        if view.target.len() < batch_size {
            return Err(Error::Config(format!(
                "batch_size {batch_size} exceeds {} target samples",
                view.target.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<usize> = view.sources.iter().map(|s| s.train.len()).collect();
        let offsets = sizes
            .iter()
            .scan(0, |acc, &n| {
                let start = *acc;
                *acc += n;
                Some(start)
            })
            .collect();
        let pool_size = sizes.iter().sum();
        let branch = sizes.iter().map(|&n| Cursor::new(n, &mut rng)).collect();
        let equal = match mode {
            CombinedSampling::Equal => sizes.iter().map(|&n| Cursor::new(n, &mut rng)).collect(),
            CombinedSampling::Proportional => Vec::new(),
        };
        let combined = Cursor::new(pool_size, &mut rng);
        let target = Cursor::new(view.target.len(), &mut rng);
        Ok(Self {
            batch_size,
            mode,
            rng,
            branch,
            equal,
            combined,
            target,
            offsets,
            pool_size,
            epoch: 0,
            step_in_epoch: 0,
            next_domain: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pool_size.div_ceil(self.batch_size)
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step_in_epoch(&self) -> usize {
        self.step_in_epoch
    }

    pub fn next_batch(&mut self, view: &TrainView<'_>) -> StepBatch {
        let steps = self.steps_per_epoch();
        let rng = &mut self.rng;
        let branches = view
            .sources
            .iter()
            .zip(self.branch.iter_mut())
            .map(|(s, cursor)| s.train.gather(&cursor.take(self.batch_size, rng)))
            .collect();

        let n = if self.step_in_epoch + 1 == steps {
            self.pool_size - self.step_in_epoch * self.batch_size
        } else {
            self.batch_size
        };
        let combined_ids: Vec<usize> = match self.mode {
            CombinedSampling::Proportional => {
                debug_assert!(self.combined.remaining() >= n || self.combined.remaining() == 0);
                self.combined.take(n, rng)
            }
            CombinedSampling::Equal => (0..n)
                .map(|_| {
                    let d = self.next_domain;
                    self.next_domain = (d + 1) % self.equal.len();
                    self.offsets[d] + self.equal[d].next(rng)
                })
                .collect(),
        };
        let mut rows = Vec::with_capacity(n * view.input_dim);
        let mut y = Vec::with_capacity(n);
        for &id in &combined_ids {
            let (d, i) = locate(&self.offsets, id);
            rows.extend_from_slice(view.sources[d].train.x.row(i));
            y.push(view.sources[d].train.y[i]);
        }
        let combined = Batch {
            x: Tensor::matrix(n, view.input_dim, rows).expect("n rows"),
            y,
        };

        let target = gather_rows(&view.target.x, &self.target.take(self.batch_size, &mut self.rng));

        self.step_in_epoch += 1;
        if self.step_in_epoch == steps {
            self.step_in_epoch = 0;
            self.epoch += 1;
        }
        StepBatch {
            branches,
            combined,
            combined_ids,
            target,
        }
    }
}
