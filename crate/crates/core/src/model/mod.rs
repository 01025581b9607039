//! The N+1 subnetwork architecture.
//!
//! Subnetworks `0..N` are branches, each paired with one source domain;
//! subnetwork `N` is the guidance network, paired with the union of all
//! sources. Every subnetwork has the same layout:
//!
//! ```text
//! x ─ trunk ─ private ─▶ features ─ classifier ─ softmax ─▶ p
//!                          │                               │
//!                          └──── Φ(features, p) ─ GRL ─ discriminator ─ sigmoid
//! ```
//!
//! The trunk is either shared by all subnetworks or instantiated per
//! subnetwork. Parameters live in one flat store so a shared layer is a
//! single storage slot referenced by every subnetwork.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower and upper clamp on discriminator probabilities before taking logs.
pub const DISCRIMINATOR_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub input_dim: usize,
    /// Hidden widths of the stage that may be shared across subnetworks.
    pub trunk_layers: Vec<usize>,
    /// Hidden widths of the per-subnetwork stage before the feature layer.
    pub private_layers: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_sources: usize,
    pub share_trunk: bool,
    pub discriminator_layers: Vec<usize>,
    /// Discriminators see `features ⊗ predictions` (width `d·K`) when true,
    /// bare features (width `d`) otherwise.
    pub conditional_discriminator: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            trunk_layers: vec![32],
            private_layers: vec![32],
            feature_dim: 16,
            num_classes: 3,
            num_sources: 4,
            share_trunk: false,
            discriminator_layers: vec![128],
            conditional_discriminator: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.num_sources < 1 {
            return fail("num_sources must be >= 1");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2");
        }
        if self.feature_dim < 1 || self.input_dim < 1 {
            return fail("feature_dim and input_dim must be >= 1");
        }
        let widths = self
            .trunk_layers
            .iter()
            .chain(&self.private_layers)
            .chain(&self.discriminator_layers);
        if widths.into_iter().any(|&w| w == 0) {
            return fail("layer widths must be >= 1");
        }
        Ok(())
    }

    pub fn subnet_count(&self) -> usize {
        self.num_sources + 1
    }

    pub fn discriminator_input_dim(&self) -> usize {
        if self.conditional_discriminator {
            self.feature_dim * self.num_classes
        } else {
            self.feature_dim
        }
    }
}

/// A named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Affine {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subnetwork {
    pub index: usize,
    trunk: Vec<Affine>,
    private: Vec<Affine>,
    classifier: Affine,
    discriminator: Vec<Affine>,
}

impl Subnetwork {
    /// Parameter-store slots of this subnetwork's trunk weights.
    pub fn trunk_slots(&self) -> Vec<usize> {
        self.trunk.iter().flat_map(|a| [a.weight, a.bias]).collect()
    }

    pub fn discriminator_slots(&self) -> Vec<usize> {
        self.discriminator.iter().flat_map(|a| [a.weight, a.bias]).collect()
    }

    /// Extractor (private stage) and classifier slots; together with
    /// [`Subnetwork::trunk_slots`] these are the minimizing player's.
    pub fn private_and_classifier_slots(&self) -> Vec<usize> {
        self.private
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|a| [a.weight, a.bias])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlMsdaModel {
    cfg: ArchConfig,
    params: Vec<Param>,
    subnets: Vec<Subnetwork>,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Affine {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = match self.rng.as_deref_mut() {
            Some(rng) => (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..=limit))
                .collect(),
            None => vec![0.0; fan_in * fan_out],
        };
        let weight = self.push(format!("{name}.weight"), Tensor::new(vec![fan_in, fan_out], data));
        let bias = self.push(format!("{name}.bias"), Ok(Tensor::zeros(&[fan_out])));
        Affine { weight, bias }
    }

    fn push(&mut self, name: String, value: Result<Tensor>) -> usize {
        self.params.push(Param {
            name,
            value: value.expect("builder shapes are consistent"),
        });
        self.params.len() - 1
    }

    fn stack(&mut self, prefix: &str, mut fan_in: usize, widths: &[usize]) -> Vec<Affine> {
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let layer = self.affine(&format!("{prefix}.{i}"), fan_in, w);
                fan_in = w;
                layer
            })
            .collect()
    }
}

/// Glorot-uniform weights, zero biases; bitwise reproducible for a seed.
pub fn init_model(cfg: &ArchConfig, seed: u64) -> Result<MlMsdaModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MlMsdaModel::build(cfg, Some(&mut rng))
}

impl MlMsdaModel {
    /// A model with every parameter set to zero.
    pub fn zeros(cfg: &ArchConfig) -> Result<Self> {
        Self::build(cfg, None)
    }

    fn build(cfg: &ArchConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng,
        };
        let trunk_out = cfg.trunk_layers.last().copied().unwrap_or(cfg.input_dim);
        let shared = cfg
            .share_trunk
            .then(|| b.stack("shared.trunk", cfg.input_dim, &cfg.trunk_layers));

        let mut private_widths = cfg.private_layers.clone();
        private_widths.push(cfg.feature_dim);
        let mut disc_widths = cfg.discriminator_layers.clone();
        disc_widths.push(1);

        let subnets = (0..cfg.subnet_count())
            .map(|j| {
                let prefix = if j == cfg.num_sources {
                    "guidance".to_string()
                } else {
                    format!("branch{j}")
                };
                let trunk = match &shared {
                    Some(t) => t.clone(),
                    None => b.stack(&format!("{prefix}.trunk"), cfg.input_dim, &cfg.trunk_layers),
                };
                let private = b.stack(&format!("{prefix}.private"), trunk_out, &private_widths);
                let classifier = b.affine(&format!("{prefix}.classifier"), cfg.feature_dim, cfg.num_classes);
                let discriminator = b.stack(
                    &format!("{prefix}.discriminator"),
                    cfg.discriminator_input_dim(),
                    &disc_widths,
                );
                Subnetwork {
                    index: j,
                    trunk,
                    private,
                    classifier,
                    discriminator,
                }
            })
            .collect();

        Ok(Self {
            cfg: cfg.clone(),
            params: b.params,
            subnets,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn num_sources(&self) -> usize {
        self.cfg.num_sources
    }

    pub fn subnet_count(&self) -> usize {
        self.subnets.len()
    }

    pub fn guidance_index(&self) -> usize {
        self.cfg.num_sources
    }

    pub fn subnet(&self, j: usize) -> Result<&Subnetwork> {
        self.subnets.get(j).ok_or(Error::SubnetIndex {
            index: j,
            count: self.subnets.len(),
        })
    }

    /// Parameters in declaration order.
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every parameter on `tape` as a gradient-collecting leaf.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape) -> Graph<'m, 't> {
        Graph {
            model: self,
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
            tape,
        }
    }

    /// Puts every parameter on `tape` as a constant, for inference.
    pub fn bind_frozen<'m, 't>(&'m self, tape: &'t Tape) -> Graph<'m, 't> {
        Graph {
            model: self,
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
            tape,
        }
    }

    /// Uses caller-supplied handles in place of the stored parameter values,
    /// one per parameter in declaration order with matching shapes.
    pub fn bind_vars<'m, 't>(&'m self, tape: &'t Tape, vars: Vec<Var<'t>>) -> Result<Graph<'m, 't>> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "bind_vars",
                format!("{} vars for {} parameters", vars.len(), self.params.len()),
            ));
        }
        for (v, p) in vars.iter().zip(&self.params) {
            if v.shape() != p.value.shape() {
                return Err(Error::shape(
                    "bind_vars",
                    format!("{}: {:?} vs {:?}", p.name, v.shape(), p.value.shape()),
                ));
            }
        }
        Ok(Graph {
            model: self,
            vars,
            tape,
        })
    }

    /// Features of subnetwork `j` for a batch, without recording gradients.
    pub fn features(&self, j: usize, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let g = self.bind_frozen(&tape);
        Ok(g.extract(j, &tape.constant(x.clone()))?.to_tensor())
    }

    /// Class distributions of subnetwork `j` for a batch.
    pub fn predict(&self, j: usize, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let g = self.bind_frozen(&tape);
        let f = g.extract(j, &tape.constant(x.clone()))?;
        Ok(g.classify(j, &f)?.to_tensor())
    }
}

/// Conditioning map Φ: per-sample `features ⊗ preds`, flattened
/// feature-major. With `detach_preds` the predictions are treated as
/// constants.
pub fn condition<'t>(features: &Var<'t>, preds: &Var<'t>, detach_preds: bool) -> Result<Var<'t>> {
    if detach_preds {
        features.outer_flatten(&preds.stop_gradient())
    } else {
        features.outer_flatten(preds)
    }
}

/// Switches that change the forward wiring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// Feed `Φ(features, preds)` to the discriminators; bare features otherwise.
    pub condition_adv: bool,
    pub detach_preds: bool,
    /// Gradient-reversal scale between the extractor and each discriminator.
    pub adv_scale: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            condition_adv: true,
            detach_preds: true,
            adv_scale: 1.0,
        }
    }
}

/// Inputs of one forward pass. `sources[j]` feeds subnetwork `j`; the last
/// entry is the combined-source batch for the guidance network. The same
/// target batch feeds every subnetwork.
pub struct ForwardInputs<'t> {
    pub sources: Vec<Var<'t>>,
    pub target: Var<'t>,
}

#[derive(Debug)]
pub struct SubnetOutputs<'t> {
    pub source_features: Var<'t>,
    pub target_features: Var<'t>,
    pub source_probs: Var<'t>,
    pub target_probs: Var<'t>,
    pub d_source: Var<'t>,
    pub d_target: Var<'t>,
}

/// A model's parameters bound onto one tape.
pub struct Graph<'m, 't> {
    model: &'m MlMsdaModel,
    vars: Vec<Var<'t>>,
    tape: &'t Tape,
}

impl<'m, 't> Graph<'m, 't> {
    pub fn model(&self) -> &'m MlMsdaModel {
        self.model
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Parameter handles in declaration order.
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients for every parameter (zeros where none reached it).
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.model.params())
            .map(|(v, p)| v.grad().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    fn affine(&self, layer: Affine, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&self.vars[layer.weight])?.add_row(&self.vars[layer.bias])
    }

    fn relu_stack(&self, layers: &[Affine], x: &Var<'t>) -> Result<Var<'t>> {
        layers.iter().try_fold(*x, |h, &l| self.affine(l, &h)?.relu())
    }

    fn check_width(&self, op: &'static str, x: &Var<'t>, width: usize) -> Result<()> {
        match x.shape().as_slice() {
            &[_, w] if w == width => Ok(()),
            other => Err(Error::shape(op, format!("expected [b x {width}], got {other:?}"))),
        }
    }

    pub fn trunk(&self, j: usize, x: &Var<'t>) -> Result<Var<'t>> {
        let net = self.model.subnet(j)?;
        self.check_width("extract", x, self.model.cfg.input_dim)?;
        self.relu_stack(&net.trunk, x)
    }

    /// `G_j(x)`: trunk then private stage, ReLU after every layer.
    pub fn extract(&self, j: usize, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.trunk(j, x)?;
        self.relu_stack(&self.model.subnet(j)?.private, &h)
    }

    pub fn logits(&self, j: usize, features: &Var<'t>) -> Result<Var<'t>> {
        let net = self.model.subnet(j)?;
        self.check_width("classify", features, self.model.cfg.feature_dim)?;
        self.affine(net.classifier, features)
    }

    /// `F_j(features)` as row distributions.
    pub fn classify(&self, j: usize, features: &Var<'t>) -> Result<Var<'t>> {
        self.logits(j, features)?.softmax_rows()
    }

    /// `D_j` on a conditioned batch, behind a gradient reversal of
    /// `adv_scale`. Outputs are sigmoid probabilities, shape `[b x 1]`.
    pub fn discriminate(&self, j: usize, conditioned: &Var<'t>, adv_scale: f64) -> Result<Var<'t>> {
        let net = self.model.subnet(j)?;
        self.check_width("discriminate", conditioned, self.model.cfg.discriminator_input_dim())?;
        let (last, hidden) = net.discriminator.split_last().expect("at least one layer");
        let h = self.relu_stack(hidden, &conditioned.gradient_reversal(adv_scale)?)?;
        self.affine(*last, &h)?.sigmoid()
    }

    fn discriminator_input(&self, f: &Var<'t>, p: &Var<'t>, opts: &ForwardOptions) -> Result<Var<'t>> {
        if opts.condition_adv {
            condition(f, p, opts.detach_preds)
        } else {
            Ok(*f)
        }
    }

    /// Runs all N+1 subnetworks on their source batch and the shared target batch.
    pub fn forward_all(&self, inputs: &ForwardInputs<'t>, opts: &ForwardOptions) -> Result<Vec<SubnetOutputs<'t>>> {
        let count = self.model.subnet_count();
        if inputs.sources.len() != count {
            return Err(Error::Incompatible(format!(
                "{} source batches for {count} subnetworks",
                inputs.sources.len()
            )));
        }
        if opts.condition_adv != self.model.cfg.conditional_discriminator {
            return Err(Error::Incompatible(format!(
                "condition_adv={} but model discriminators were built with conditional={}",
                opts.condition_adv, self.model.cfg.conditional_discriminator
            )));
        }
        (0..count)
            .map(|j| {
                let source_features = self.extract(j, &inputs.sources[j])?;
                let target_features = self.extract(j, &inputs.target)?;
                let source_probs = self.classify(j, &source_features)?;
                let target_probs = self.classify(j, &target_features)?;
                let d_source = self.discriminate(
                    j,
                    &self.discriminator_input(&source_features, &source_probs, opts)?,
                    opts.adv_scale,
                )?;
                let d_target = self.discriminate(
                    j,
                    &self.discriminator_input(&target_features, &target_probs, opts)?,
                    opts.adv_scale,
                )?;
                Ok(SubnetOutputs {
                    source_features,
                    target_features,
                    source_probs,
                    target_probs,
                    d_source,
                    d_target,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
