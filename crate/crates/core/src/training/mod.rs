//! The optimization loop: one SGD-with-momentum optimizer over all players,
//! with gradient reversal standing in for the adversarial maximization.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::config::{derive_seed, RunConfig, SeedStream};
use crate::data::{MultiDomainDataset, Sampler, StepBatch};
use crate::error::{Error, Result};
use crate::evaluation::{probe_discriminator, snapshot, InferenceMode, ModeAccuracy};
use crate::losses::{build_objective, one_hot, HyperParams, LossBundle};
use crate::model::{ForwardInputs, ForwardOptions, MlMsdaModel};

/// Step-wise learning rate: 0.01 for epochs 0–9, 0.001 for 10–19, 0.0001 after.
pub fn lr_at(epoch: usize) -> f64 {
    match epoch {
        0..=9 => 0.01,
        10..=19 => 0.001,
        _ => 0.0001,
    }
}

/// Switches for the ablated variants. All `false` with ensemble inference
/// is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Discriminators see bare features instead of `features ⊗ predictions`.
    pub no_condition_adv: bool,
    /// Forces `beta = 0`.
    pub no_entropy: bool,
    /// Forces `alpha = 0`.
    pub no_mutual: bool,
    pub inference_mode: InferenceMode,
}

impl AblationFlags {
    pub fn apply(&self, hp: &HyperParams) -> HyperParams {
        HyperParams {
            alpha: if self.no_mutual { 0.0 } else { hp.alpha },
            beta: if self.no_entropy { 0.0 } else { hp.beta },
            lambda: hp.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    /// One buffer per model parameter, same shapes.
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
    /// Steps taken since the start of training.
    pub step: usize,
}

impl OptimState {
    pub fn new(model: &MlMsdaModel, momentum: f64) -> Self {
        Self {
            learning_rate: lr_at(0),
            momentum,
            velocity: model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            epoch: 0,
            step: 0,
        }
    }

    /// `v ← m·v + g; θ ← θ − lr·v` for every parameter.
    pub fn apply(&mut self, model: &mut MlMsdaModel, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Incompatible(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            )));
        }
        let (m, lr) = (self.momentum, self.learning_rate);
        for ((p, v), g) in model.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            if g.shape() != v.shape() {
                return Err(Error::shape(
                    "sgd_update",
                    format!("gradient for {} has shape {:?}", p.name, g.shape()),
                ));
            }
            for ((theta, vi), gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = m * *vi + gi;
                *theta -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Per-step wiring choices that are not loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub detach_preds: bool,
    pub freeze_guidance_mutual: bool,
    /// Multiplier on the reversed adversarial gradient (warm-up ramp).
    pub adv_scale: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            detach_preds: true,
            freeze_guidance_mutual: false,
            adv_scale: 1.0,
        }
    }
}

fn diverged(opt: &OptimState, err: Error) -> Error {
    match err {
        Error::Numeric { op, detail } => Error::Diverged {
            epoch: opt.epoch,
            step: opt.step,
            detail: format!("{op}: {detail}"),
        },
        other => other,
    }
}

/// Gradients of the step objective for every parameter, plus its loss values.
pub fn step_gradients(
    model: &MlMsdaModel,
    batch: &StepBatch,
    hp: &HyperParams,
    flags: &AblationFlags,
    opts: &StepOptions,
) -> Result<(LossBundle, Vec<Tensor>)> {
    let k = model.config().num_classes;
    let tape = Tape::new();
    let g = model.bind(&tape);
    let mut sources: Vec<_> = batch.branches.iter().map(|b| tape.constant(b.x.clone())).collect();
    sources.push(tape.constant(batch.combined.x.clone()));
    let mut labels = batch
        .branches
        .iter()
        .map(|b| Ok(tape.constant(one_hot(&b.y, k)?)))
        .collect::<Result<Vec<_>>>()?;
    labels.push(tape.constant(one_hot(&batch.combined.y, k)?));
    let inputs = ForwardInputs {
        sources,
        target: tape.constant(batch.target.clone()),
    };
    let forward = ForwardOptions {
        condition_adv: !flags.no_condition_adv,
        detach_preds: opts.detach_preds,
        adv_scale: opts.adv_scale,
    };
    let hp = flags.apply(hp);
    let outputs = g.forward_all(&inputs, &forward)?;
    let objective = build_objective(&outputs, &labels, &hp, opts.freeze_guidance_mutual)?;
    let bundle = objective.bundle(&hp)?;
    tape.backward(objective.surrogate)?;
    Ok((bundle, g.grads()))
}

/// One forward/backward pass and one momentum-SGD update.
pub fn train_step(
    model: &mut MlMsdaModel,
    batch: &StepBatch,
    hp: &HyperParams,
    flags: &AblationFlags,
    opts: &StepOptions,
    opt: &mut OptimState,
) -> Result<LossBundle> {
    let (bundle, grads) = step_gradients(model, batch, hp, flags, opts).map_err(|e| diverged(opt, e))?;
    opt.apply(model, &grads)?;
    opt.step += 1;
    Ok(bundle)
}

/// One line of the per-epoch metrics stream. Contains nothing
/// time-dependent, so identical runs produce identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Epoch means of the step losses.
    pub l_c: f64,
    pub l_e: f64,
    pub l_adv: f64,
    pub l_m: f64,
    pub total: f64,
    /// Per subnetwork, guidance last: source test accuracy.
    pub source_accuracy: Vec<f64>,
    pub subnet_target_accuracy: Vec<f64>,
    pub target_accuracy: ModeAccuracy,
    /// Target accuracy under the configured inference mode.
    pub accuracy: f64,
    pub discriminator_accuracy: Vec<f64>,
    /// Linear-probe accuracy per subnetwork; only on probed epochs.
    pub probe_accuracy: Option<Vec<f64>>,
    pub config_hash: String,
}

/// Handed to the observer after every epoch.
pub struct EpochEnd<'a> {
    pub record: &'a MetricsRecord,
    pub model: &'a MlMsdaModel,
    pub optim: &'a OptimState,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: MlMsdaModel,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Default)]
struct LossMeans {
    sums: [f64; 5],
    n: usize,
}

impl LossMeans {
    fn add(&mut self, b: &LossBundle) {
        let v = [b.l_c, b.l_e, b.l_adv, b.l_m, b.total];
        self.sums.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        self.n += 1;
    }

    fn means(&self) -> [f64; 5] {
        self.sums.map(|s| s / self.n.max(1) as f64)
    }
}

pub fn train(model: MlMsdaModel, ds: &MultiDomainDataset, cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(model, ds, cfg, |_| Ok(()))
}

/// Runs `cfg.optim.epochs` epochs, calling `observer` after each one.
pub fn train_with(
    mut model: MlMsdaModel,
    ds: &MultiDomainDataset,
    cfg: &RunConfig,
    mut observer: impl FnMut(&EpochEnd<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_dataset(ds)?;
    if model.config() != &cfg.resolved_arch() {
        return Err(Error::Incompatible(
            "model architecture differs from the run config".into(),
        ));
    }
    let hash = cfg.config_hash();
    let mut metrics = Vec::with_capacity(cfg.optim.epochs);
    if cfg.optim.epochs == 0 {
        return Ok(TrainOutcome { model, metrics });
    }
    let view = ds.train_view();
    let mut sampler = Sampler::new(
        &view,
        cfg.optim.batch_size,
        cfg.optim.combined_sampling,
        derive_seed(cfg.seed, SeedStream::Sampler),
    )?;
    let steps = sampler.steps_per_epoch();
    let mut opt = OptimState::new(&model, cfg.optim.momentum);
    let probe_seed = derive_seed(cfg.seed, SeedStream::Probe);

    for epoch in 0..cfg.optim.epochs {
        let started = Instant::now();
        opt.epoch = epoch;
        opt.learning_rate = lr_at(epoch);
        let mut means = LossMeans::default();
        for _ in 0..steps {
            let batch = sampler.next_batch(&view);
            let adv_scale = if cfg.optim.adv_warmup {
                ((opt.step + 1) as f64 / steps as f64).min(1.0)
            } else {
                1.0
            };
            let opts = StepOptions {
                detach_preds: cfg.options.detach_preds,
                freeze_guidance_mutual: cfg.options.freeze_guidance_mutual,
                adv_scale,
            };
            let bundle = train_step(&mut model, &batch, &cfg.hp, &cfg.flags, &opts, &mut opt)?;
            means.add(&bundle);
        }
        let [l_c, l_e, l_adv, l_m, total] = means.means();
        let snap = snapshot(&model, ds)?;
        let probe = cfg.options.probe_every_epoch || epoch + 1 == cfg.optim.epochs;
        let record = MetricsRecord {
            epoch,
            learning_rate: opt.learning_rate,
            steps,
            l_c,
            l_e,
            l_adv,
            l_m,
            total,
            source_accuracy: snap.source_accuracy,
            subnet_target_accuracy: snap.subnet_target_accuracy,
            accuracy: snap.target_accuracy.get(cfg.flags.inference_mode),
            target_accuracy: snap.target_accuracy,
            discriminator_accuracy: snap.discriminator_accuracy,
            probe_accuracy: if probe {
                Some(probe_discriminator(&model, ds, probe_seed)?)
            } else {
                None
            },
            config_hash: hash.clone(),
        };
        observer(&EpochEnd {
            record: &record,
            model: &model,
            optim: &opt,
            seconds: started.elapsed().as_secs_f64(),
        })?;
        metrics.push(record);
    }
    Ok(TrainOutcome { model, metrics })
}
