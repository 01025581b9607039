//! Loss terms and their combination into the training objective.
//!
//! All probability logs clamp their argument to `[PROB_EPS, 1]`, so a zero
//! probability contributes `0 · log ε = 0` wherever it is the weight.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{SubnetOutputs, DISCRIMINATOR_EPS};

pub const PROB_EPS: f64 = 1e-7;

/// Trade-off weights of the mutual (`alpha`), entropy (`beta`) and
/// adversarial (`lambda`) terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 0.5,
            lambda: 5.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.beta, self.lambda]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "hyperparameters must be finite and >= 0: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubnetLosses {
    pub l_c: f64,
    pub l_e: f64,
    pub l_adv: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_c: f64,
    pub l_e: f64,
    pub l_adv: f64,
    pub l_m: f64,
    /// `l_c + alpha·l_m + beta·l_e + lambda·l_adv`.
    pub total: f64,
    #[serde(default)]
    pub per_subnet: Vec<SubnetLosses>,
}

fn log_p<'t>(p: &Var<'t>) -> Result<Var<'t>> {
    p.log_clamped(PROB_EPS, 1.0)
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Label(format!("label {y} >= {num_classes}")));
        }
        data[i * num_classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), num_classes, data)
}

fn check_one_hot(labels: &Tensor) -> Result<()> {
    let (b, _) = labels.dims2()?;
    for i in 0..b {
        let row = labels.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Label(format!("row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// `-mean_i y_iᵀ log p_i`.
pub fn cross_entropy<'t>(preds: &Var<'t>, labels: &Var<'t>) -> Result<Var<'t>> {
    same_shape("cross_entropy", preds, labels)?;
    check_one_hot(&labels.value())?;
    log_p(preds)?.mul(labels)?.sum_axis(1)?.mean()?.neg()
}

/// Mean Shannon entropy of the rows, `-mean_i p_iᵀ log p_i`.
pub fn entropy_loss<'t>(preds: &Var<'t>) -> Result<Var<'t>> {
    log_p(preds)?.mul(preds)?.sum_axis(1)?.mean()?.neg()
}

/// `mean log D(source) + mean log(1 - D(target))`: source is class 1,
/// target class 0. The discriminator maximizes this value.
pub fn adversarial_loss_j<'t>(d_src: &Var<'t>, d_tgt: &Var<'t>) -> Result<Var<'t>> {
    let hi = 1.0 - DISCRIMINATOR_EPS;
    let src = d_src.log_clamped(DISCRIMINATOR_EPS, hi)?.mean()?;
    let tgt = d_tgt
        .neg()?
        .add_scalar(1.0)?
        .log_clamped(DISCRIMINATOR_EPS, hi)?
        .mean()?;
    src.add(&tgt)
}

/// Mean of `terms`, which must have exactly `expected` entries.
pub fn mean_of<'t>(terms: &[Var<'t>], expected: usize) -> Result<Var<'t>> {
    if terms.len() != expected || terms.is_empty() {
        return Err(Error::shape(
            "mean_of",
            format!("expected {expected} terms, got {}", terms.len()),
        ));
    }
    let (first, rest) = terms.split_first().expect("non-empty");
    rest.iter()
        .try_fold(*first, |acc, t| acc.add(t))?
        .scale(1.0 / terms.len() as f64)
}

/// Average of the N+1 per-subnetwork adversarial losses.
pub fn adversarial_total<'t>(per_j: &[Var<'t>], subnet_count: usize) -> Result<Var<'t>> {
    mean_of(per_j, subnet_count)
}

/// Row-wise `KL(p_i ‖ q_i)`, shape `[b]`.
pub fn kl_rows<'t>(p: &Var<'t>, q: &Var<'t>) -> Result<Var<'t>> {
    same_shape("kl_divergence", p, q)?;
    log_p(p)?.sub(&log_p(q)?)?.mul(p)?.sum_axis(1)
}

/// Batch mean of `KL(p_i ‖ q_i)`; for a single row this is the divergence itself.
pub fn kl_divergence<'t>(p: &Var<'t>, q: &Var<'t>) -> Result<Var<'t>> {
    kl_rows(p, q)?.mean()
}

/// Symmetric KL between each branch and the guidance network on shared
/// target rows, `(1 / 2N n_t) Σ_j Σ_i [KL(b_ji ‖ g_i) + KL(g_i ‖ b_ji)]`.
/// Branches are never compared with one another.
pub fn mutual_loss<'t>(branch_preds: &[Var<'t>], guidance_preds: &Var<'t>, freeze_guidance: bool) -> Result<Var<'t>> {
    if branch_preds.is_empty() {
        return Err(Error::shape("mutual_loss", "no branch predictions"));
    }
    let guidance = if freeze_guidance {
        guidance_preds.stop_gradient()
    } else {
        *guidance_preds
    };
    let terms = branch_preds
        .iter()
        .map(|b| {
            let forward = kl_rows(b, &guidance)?;
            let backward = kl_rows(&guidance, b)?;
            forward.add(&backward)?.mean()
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(&terms, branch_preds.len())?.scale(0.5)
}

/// Weighted sum of the four components.
pub fn total_objective(l_c: f64, l_e: f64, l_adv: f64, l_m: f64, hp: &HyperParams) -> Result<LossBundle> {
    for (name, v) in [("l_c", l_c), ("l_e", l_e), ("l_adv", l_adv), ("l_m", l_m)] {
        if !v.is_finite() {
            return Err(Error::numeric("total_objective", format!("{name} = {v}")));
        }
    }
    Ok(LossBundle {
        l_c,
        l_e,
        l_adv,
        l_m,
        total: l_c + hp.alpha * l_m + hp.beta * l_e + hp.lambda * l_adv,
        per_subnet: Vec::new(),
    })
}

/// Graph nodes of one step's objective.
pub struct Objective<'t> {
    pub l_c: Var<'t>,
    pub l_e: Var<'t>,
    pub l_adv: Var<'t>,
    pub l_m: Var<'t>,
    per_subnet: Vec<[Var<'t>; 3]>,
    /// The scalar to differentiate:
    /// `l_c + alpha·l_m + beta·l_e - lambda·l_adv`.
    ///
    /// Discriminator parameters descend on `-lambda·l_adv`, i.e. ascend the
    /// adversarial loss. The gradient reversal in front of each
    /// discriminator flips that signal for the extractors, which therefore
    /// descend on `+lambda·l_adv`: exactly the gradient of
    /// [`LossBundle::total`] for the minimizing players.
    pub surrogate: Var<'t>,
}

impl Objective<'_> {
    pub fn bundle(&self, hp: &HyperParams) -> Result<LossBundle> {
        let mut bundle = total_objective(
            self.l_c.item()?,
            self.l_e.item()?,
            self.l_adv.item()?,
            self.l_m.item()?,
            hp,
        )?;
        bundle.per_subnet = self
            .per_subnet
            .iter()
            .map(|[c, e, a]| {
                Ok(SubnetLosses {
                    l_c: c.item()?,
                    l_e: e.item()?,
                    l_adv: a.item()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(bundle)
    }
}

/// Assembles every loss component from a forward pass. `source_labels[j]`
/// holds the one-hot labels of subnetwork `j`'s source batch.
pub fn build_objective<'t>(
    outputs: &[SubnetOutputs<'t>],
    source_labels: &[Var<'t>],
    hp: &HyperParams,
    freeze_guidance: bool,
) -> Result<Objective<'t>> {
    let count = outputs.len();
    if count < 2 || source_labels.len() != count {
        return Err(Error::shape(
            "build_objective",
            format!("{count} subnetworks, {} label batches", source_labels.len()),
        ));
    }
    let per_subnet = outputs
        .iter()
        .zip(source_labels)
        .map(|(o, y)| {
            Ok([
                cross_entropy(&o.source_probs, y)?,
                entropy_loss(&o.target_probs)?,
                adversarial_loss_j(&o.d_source, &o.d_target)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let column = |i: usize| per_subnet.iter().map(|t| t[i]).collect::<Vec<_>>();
    let l_c = mean_of(&column(0), count)?;
    let l_e = mean_of(&column(1), count)?;
    let l_adv = adversarial_total(&column(2), count)?;

    let (guidance, branches) = outputs.split_last().expect("count >= 2");
    let branch_preds: Vec<Var<'t>> = branches.iter().map(|o| o.target_probs).collect();
    let l_m = mutual_loss(&branch_preds, &guidance.target_probs, freeze_guidance)?;

    let surrogate = l_c
        .add(&l_m.scale(hp.alpha)?)?
        .add(&l_e.scale(hp.beta)?)?
        .sub(&l_adv.scale(hp.lambda)?)?;
    Ok(Objective {
        l_c,
        l_e,
        l_adv,
        l_m,
        per_subnet,
        surrogate,
    })
}
