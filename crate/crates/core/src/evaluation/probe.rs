//! Linear separability of source and target features.
//!
//! A logistic regression is fit on 70% of a balanced source/target feature
//! set and scored on the rest. Held-out accuracy near ½ means the extractor
//! maps both domains to indistinguishable features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Tensor};
use crate::data::{concat_rows, gather_rows, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::model::MlMsdaModel;

/// Fewest rows per domain the probe accepts.
pub const PROBE_MIN_SAMPLES: usize = 10;

const TRAIN_FRACTION: f64 = 0.7;
const STEP: f64 = 0.5;
const L2: f64 = 1e-3;
const MAX_ITERS: usize = 3000;
const GRAD_TOL: f64 = 1e-7;

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&[f64]], dim: usize) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            var.iter_mut()
                .zip(r.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
        }
        // constant columns (e.g. dead ReLU units) pass through centred
        let scale = var
            .iter()
            .map(|v| if v.sqrt() > 1e-12 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) * s)
            .collect()
    }
}

/// Full-batch gradient descent on the L2-regularised logistic loss.
fn fit_logistic(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let dim = x[0].len();
    let n = x.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut gw = vec![0.0; dim];
    for _ in 0..MAX_ITERS {
        gw.iter_mut().zip(&w).for_each(|(g, wi)| *g = L2 * wi);
        let mut gb = 0.0;
        for (row, &t) in x.iter().zip(y) {
            let z: f64 = row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let r = (sigmoid(z) - t) / n;
            gw.iter_mut().zip(row).for_each(|(g, a)| *g += r * a);
            gb += r;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= STEP * g);
        b -= STEP * gb;
        let norm = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        if norm < GRAD_TOL {
            break;
        }
    }
    (w, b)
}

/// Held-out accuracy of a linear probe separating `source` rows (label 1)
/// from `target` rows (label 0). The larger set is subsampled so both
/// contribute equally.
pub fn probe_accuracy(source: &Tensor, target: &Tensor, seed: u64) -> Result<f64> {
    let (ns, ds) = source.dims2()?;
    let (nt, dt) = target.dims2()?;
    if ds != dt {
        return Err(Error::shape("probe_accuracy", format!("feature widths {ds} vs {dt}")));
    }
    let n = ns.min(nt);
    if n < PROBE_MIN_SAMPLES {
        return Err(Error::InsufficientSamples(format!(
            "probe needs {PROBE_MIN_SAMPLES} rows per domain, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |total: usize, rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..total).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
        idx
    };
    let src = gather_rows(source, &pick(ns, &mut rng));
    let tgt = gather_rows(target, &pick(nt, &mut rng));
    let mut rows: Vec<(&[f64], f64)> = (0..n)
        .map(|i| (src.row(i), 1.0))
        .chain((0..n).map(|i| (tgt.row(i), 0.0)))
        .collect();
    rows.shuffle(&mut rng);

    let n_train = ((rows.len() as f64) * TRAIN_FRACTION).round() as usize;
    let (train, test) = rows.split_at(n_train);
    let train_x: Vec<&[f64]> = train.iter().map(|(r, _)| *r).collect();
    let st = Standardizer::fit(&train_x, ds);
    let xs: Vec<Vec<f64>> = train_x.iter().map(|r| st.apply(r)).collect();
    let ys: Vec<f64> = train.iter().map(|(_, t)| *t).collect();
    let (w, b) = fit_logistic(&xs, &ys);
    let hits = test
        .iter()
        .filter(|(r, t)| {
            let z: f64 = st.apply(r).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            (z > 0.0) == (*t == 1.0)
        })
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Probe accuracy for every subnetwork's extractor, using training features:
/// source `j` against the target for branch `j`, the pooled sources against
/// the target for the guidance network.
pub fn probe_discriminator(model: &MlMsdaModel, ds: &MultiDomainDataset, seed: u64) -> Result<Vec<f64>> {
    let target = &ds.target.train.x;
    let pooled = concat_rows(&ds.sources.iter().map(|s| &s.train.x).collect::<Vec<_>>());
    (0..model.subnet_count())
        .map(|j| {
            let source = if j < ds.num_sources() {
                &ds.sources[j].train.x
            } else {
                &pooled
            };
            let fs = model.features(j, source)?;
            let ft = model.features(j, target)?;
            probe_accuracy(&fs, &ft, seed.wrapping_add(j as u64))
        })
        .collect()
}
