//! Exit-gate checks. Runs as a plain binary (`harness = false`) so every
//! criterion prints its PASS/FAIL line even when the run succeeds.
//!
//! `cargo test -p mlmsda-core --test acceptance`

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlmsda::autodiff::gradcheck::{check_gradients_signed, DEFAULT_EPS};
use mlmsda::autodiff::{Tape, Tensor, Var};
use mlmsda::config::RunConfig;
use mlmsda::data::{generate_ring_domains, CombinedSampling, DomainSpec, MultiDomainDataset, Sampler};
use mlmsda::evaluation::{combine, ensemble_predict, InferenceMode, TrainingVariant};
use mlmsda::losses::{
    adversarial_loss_j, build_objective, cross_entropy, entropy_loss, kl_divergence, mutual_loss, one_hot,
    total_objective, HyperParams,
};
use mlmsda::model::{init_model, ArchConfig, ForwardInputs, ForwardOptions, MlMsdaModel};
use mlmsda::training::{lr_at, train, MetricsRecord};
use mlmsda::Result;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 10.0;
const IDENTITY_TOL: f64 = 1e-6;
const MIN_GAIN_POINTS: f64 = 5.0;
const ADAPT_SECONDS: f64 = 300.0;

/// Seed-averaged target-test accuracy on ring5 measured when the default
/// configuration was frozen: full method (ensemble inference) and the
/// source-only baseline (all trade-off weights zero, guidance-only).
const FROZEN_FULL: f64 = 0.9710;
const FROZEN_SOURCE_ONLY: f64 = 0.7640;
/// A live rerun must land this close to the frozen numbers.
const FROZEN_TOL: f64 = 0.02;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, result: Result<(bool, String)>) -> Outcome {
    let (pass, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn rows(r: &[&[f64]]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

type OpFn = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;
/// Name, operand shapes, domain of the first operand, gradient sign of the
/// first operand, op.
type OpCase = (&'static str, Vec<Vec<usize>>, (f64, f64), f64, OpFn);

/// Each op, contracted with a random weight so every output element matters.
fn op_cases() -> Vec<OpCase> {
    vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2], vec![3, 2]],
            (-2.0, 2.0),
            1.0,
            |v| v[0].matmul(&v[1])?.mul(&v[2])?.sum(),
        ),
        ("add", vec![vec![3, 2], vec![3, 2], vec![3, 2]], (-2.0, 2.0), 1.0, |v| {
            v[0].add(&v[1])?.mul(&v[2])?.sum()
        }),
        ("sub", vec![vec![3, 2], vec![3, 2], vec![3, 2]], (-2.0, 2.0), 1.0, |v| {
            v[0].sub(&v[1])?.mul(&v[2])?.sum()
        }),
        ("mul", vec![vec![3, 2], vec![3, 2], vec![3, 2]], (-2.0, 2.0), 1.0, |v| {
            v[0].mul(&v[1])?.mul(&v[2])?.sum()
        }),
        (
            "add_row",
            vec![vec![3, 2], vec![2], vec![3, 2]],
            (-2.0, 2.0),
            1.0,
            |v| v[0].add_row(&v[1])?.mul(&v[2])?.sum(),
        ),
        ("relu", vec![vec![3, 3], vec![3, 3]], (-2.0, 2.0), 1.0, |v| {
            v[0].relu()?.mul(&v[1])?.sum()
        }),
        ("exp", vec![vec![3, 3], vec![3, 3]], (-2.0, 2.0), 1.0, |v| {
            v[0].exp()?.mul(&v[1])?.sum()
        }),
        ("log", vec![vec![3, 3], vec![3, 3]], (0.2, 2.0), 1.0, |v| {
            v[0].log()?.mul(&v[1])?.sum()
        }),
        ("log_clamped", vec![vec![3, 3], vec![3, 3]], (0.05, 0.95), 1.0, |v| {
            v[0].log_clamped(1e-7, 1.0)?.mul(&v[1])?.sum()
        }),
        ("neg", vec![vec![3, 3], vec![3, 3]], (-2.0, 2.0), 1.0, |v| {
            v[0].neg()?.mul(&v[1])?.sum()
        }),
        ("sigmoid", vec![vec![3, 3], vec![3, 3]], (-2.0, 2.0), 1.0, |v| {
            v[0].sigmoid()?.mul(&v[1])?.sum()
        }),
        ("scale", vec![vec![3, 3], vec![3, 3]], (-2.0, 2.0), 1.0, |v| {
            v[0].scale(-1.7)?.add_scalar(0.3)?.mul(&v[1])?.sum()
        }),
        ("softmax_rows", vec![vec![4, 3], vec![4, 3]], (-2.0, 2.0), 1.0, |v| {
            v[0].softmax_rows()?.mul(&v[1])?.sum()
        }),
        ("mean", vec![vec![3, 3], vec![3, 3]], (-2.0, 2.0), 1.0, |v| {
            v[0].mul(&v[1])?.mean()
        }),
        (
            "sum_axis",
            vec![vec![3, 4], vec![3, 4], vec![4]],
            (-2.0, 2.0),
            1.0,
            |v| v[0].mul(&v[1])?.sum_axis(0)?.mul(&v[2])?.sum(),
        ),
        (
            "mean_axis",
            vec![vec![3, 4], vec![3, 4], vec![3]],
            (-2.0, 2.0),
            1.0,
            |v| v[0].mul(&v[1])?.mean_axis(1)?.mul(&v[2])?.sum(),
        ),
        (
            "outer_flatten",
            vec![vec![3, 2], vec![3, 4], vec![3, 8]],
            (-2.0, 2.0),
            1.0,
            |v| v[0].outer_flatten(&v[1])?.mul(&v[2])?.sum(),
        ),
        // reversal: the analytic gradient of the first input is -0.7 times the numeric one
        (
            "gradient_reversal",
            vec![vec![3, 3], vec![3, 3]],
            (-2.0, 2.0),
            -0.7,
            |v| v[0].gradient_reversal(0.7)?.mul(&v[1])?.sum(),
        ),
    ]
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        input_dim: 3,
        trunk_layers: vec![5],
        private_layers: vec![4],
        feature_dim: 3,
        num_classes: 3,
        num_sources: 2,
        share_trunk: false,
        discriminator_layers: vec![6],
        conditional_discriminator: true,
    }
}

/// ReLU is not differentiable at 0, so a central difference is meaningless
/// for any pre-activation within reach of an `eps` step. Points closer than
/// this to a kink are redrawn.
const KINK_MARGIN: f64 = 5e-3;

fn layer(model: &MlMsdaModel, name: &str, h: &Tensor) -> Option<Tensor> {
    let find = |suffix: &str| model.params().iter().find(|p| p.name == format!("{name}.{suffix}"));
    let (w, b) = (find("weight")?, find("bias")?);
    let mut z = h.matmul(&w.value).unwrap();
    let width = b.value.numel();
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        *v += b.value.data()[i % width];
    }
    Some(z)
}

/// Smallest |pre-activation| over every ReLU the objective evaluates.
fn relu_margin(model: &MlMsdaModel, sources: &[Tensor], target: &Tensor) -> f64 {
    let mut margin = f64::INFINITY;
    let relu = |z: Tensor, margin: &mut f64| {
        *margin = z.data().iter().fold(*margin, |m, v| m.min(v.abs()));
        z.map(|v| v.max(0.0))
    };
    for (j, x) in sources.iter().enumerate() {
        let prefix = if j == model.guidance_index() {
            "guidance".to_string()
        } else {
            format!("branch{j}")
        };
        for batch in [x, target] {
            let mut h = batch.clone();
            for stage in ["trunk", "private"] {
                let mut i = 0;
                while let Some(z) = layer(model, &format!("{prefix}.{stage}.{i}"), &h) {
                    h = relu(z, &mut margin);
                    i += 1;
                }
            }
            let preds = model.predict(j, batch).unwrap();
            let (n, d) = h.dims2().unwrap();
            let k = preds.shape()[1];
            let mut phi = Vec::with_capacity(n * d * k);
            for r in 0..n {
                for f in h.row(r) {
                    phi.extend(preds.row(r).iter().map(|p| f * p));
                }
            }
            let mut h = Tensor::matrix(n, d * k, phi).unwrap();
            let hidden = model.config().discriminator_layers.len();
            for i in 0..hidden {
                h = relu(
                    layer(model, &format!("{prefix}.discriminator.{i}"), &h).unwrap(),
                    &mut margin,
                );
            }
        }
    }
    margin
}

struct ObjectivePoint {
    model: MlMsdaModel,
    sources: Vec<Tensor>,
    labels: Vec<Tensor>,
    target: Tensor,
}

/// A random tiny model and batch 4 with every ReLU at least
/// [`KINK_MARGIN`] from its kink. Biases are random too, so upstream dead
/// units cannot pin a pre-activation at exactly zero.
fn objective_point(seed: u64) -> Result<(ObjectivePoint, usize)> {
    let arch = tiny_arch();
    let batch = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for redraws in 0.. {
        let mut model = init_model(&arch, rng.random())?;
        for p in model.params_mut() {
            if p.name.ends_with("bias") {
                p.value = random(p.value.shape(), -0.5, 0.5, &mut rng);
            }
        }
        let sources: Vec<Tensor> = (0..arch.subnet_count())
            .map(|_| random(&[batch, 3], -2.0, 2.0, &mut rng))
            .collect();
        let labels: Vec<Tensor> = (0..arch.subnet_count())
            .map(|_| one_hot(&(0..batch).map(|_| rng.random_range(0..3)).collect::<Vec<_>>(), 3))
            .collect::<Result<_>>()?;
        let target = random(&[batch, 3], -2.0, 2.0, &mut rng);
        if relu_margin(&model, &sources, &target) >= KINK_MARGIN {
            return Ok((
                ObjectivePoint {
                    model,
                    sources,
                    labels,
                    target,
                },
                redraws,
            ));
        }
    }
    unreachable!()
}

/// Worst relative error of the training gradient against central
/// differences of the reported objective, on a tiny model.
///
/// The checked scalar has the value of `LossBundle::total` but the gradient
/// of the training surrogate, so the numeric side differentiates the
/// objective and the analytic side is what the optimizer actually receives.
/// Minimizing players must see `+d total`, discriminators `-d total`.
fn objective_gradcheck(point: &ObjectivePoint) -> Result<f64> {
    let model = &point.model;
    let hp = HyperParams::default();
    let mut signs = vec![1.0; model.params().len()];
    for j in 0..model.subnet_count() {
        for slot in model.subnet(j)?.discriminator_slots() {
            signs[slot] = -1.0;
        }
    }
    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let opts = ForwardOptions {
        condition_adv: true,
        // the numeric side cannot honor a stop-gradient on the predictions
        detach_preds: false,
        adv_scale: 1.0,
    };
    let report = check_gradients_signed(&inputs, &signs, DEFAULT_EPS, |tape: &Tape, vars| {
        let g = model.bind_vars(tape, vars.to_vec())?;
        let fwd = ForwardInputs {
            sources: point.sources.iter().map(|x| tape.constant(x.clone())).collect(),
            target: tape.constant(point.target.clone()),
        };
        let outputs = g.forward_all(&fwd, &opts)?;
        let y: Vec<Var<'_>> = point.labels.iter().map(|l| tape.constant(l.clone())).collect();
        let obj = build_objective(&outputs, &y, &hp, false)?;
        let correction = obj.l_adv.scale(2.0 * hp.lambda)?.stop_gradient();
        obj.surrogate.add(&correction)
    })?;
    Ok(report.max_rel_error)
}

fn gradient_correctness() -> Result<(bool, String)> {
    let started = Instant::now();
    let mut worst_op = (0.0f64, "");
    for (name, shapes, (lo, hi), sign, f) in op_cases() {
        for seed in SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    if i == 0 {
                        random(s, lo, hi, &mut rng)
                    } else {
                        random(s, -2.0, 2.0, &mut rng)
                    }
                })
                .collect();
            let mut signs = vec![1.0; inputs.len()];
            signs[0] = sign;
            let r = check_gradients_signed(&inputs, &signs, DEFAULT_EPS, |_, v| f(v))?;
            if r.max_rel_error >= worst_op.0 {
                worst_op = (r.max_rel_error, name);
            }
        }
    }
    let mut worst_obj = 0.0f64;
    let mut redraws = 0;
    for seed in SEEDS {
        let (point, r) = objective_point(seed)?;
        redraws += r;
        worst_obj = worst_obj.max(objective_gradcheck(&point)?);
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst_op.0 < GRAD_REL_TOL && worst_obj < GRAD_REL_TOL && secs < GRAD_SECONDS;
    Ok((
        pass,
        format!(
            "ops max rel err {:.2e} ({}), objective max rel err {worst_obj:.2e} ({redraws} kink redraws), tol {GRAD_REL_TOL:e}, {secs:.2}s (limit {GRAD_SECONDS}s)",
            worst_op.0, worst_op.1
        ),
    ))
}

fn loss_identities() -> Result<(bool, String)> {
    let tape = Tape::new();
    let c = |t: Tensor| tape.constant(t);
    let p = c(rows(&[&[0.2, 0.3, 0.5], &[0.6, 0.1, 0.3]]));
    let ln2 = std::f64::consts::LN_2;
    let uniform10 = c(Tensor::full(&[1, 10], 0.1));
    let preds = c(rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]));
    let labels = c(one_hot(&[0, 2], 3)?);
    let half = c(Tensor::full(&[6, 1], 0.5));
    let half_t = c(Tensor::full(&[4, 1], 0.5));
    let g = c(rows(&[&[0.1, 0.7, 0.2], &[0.3, 0.3, 0.4]]));

    let checks: Vec<(&str, f64, f64)> = vec![
        ("KL(p||p)", kl_divergence(&p, &p)?.item()?, 0.0),
        (
            "KL([1,0]||[.5,.5])",
            kl_divergence(&c(rows(&[&[1.0, 0.0]])), &c(rows(&[&[0.5, 0.5]])))?.item()?,
            ln2,
        ),
        ("H(uniform10)", entropy_loss(&uniform10)?.item()?, 10f64.ln()),
        ("CE(correct one-hot)", cross_entropy(&preds, &labels)?.item()?, 0.0),
        (
            "adv(all 0.5)",
            adversarial_loss_j(&half, &half_t)?.item()?,
            2.0 * 0.5f64.ln(),
        ),
        ("L_M(agreement)", mutual_loss(&[g, g, g], &g, false)?.item()?, 0.0),
    ];
    let (l_c, l_e, l_adv, l_m) = (0.8, 0.4, -1.3, 0.05);
    let bundle = total_objective(l_c, l_e, l_adv, l_m, &HyperParams::default())?;
    let expected_total = l_c + 5.0 * l_m + 0.5 * l_e + 5.0 * l_adv;

    let mut worst = (0.0f64, "");
    for (name, got, want) in checks.into_iter().chain([("total", bundle.total, expected_total)]) {
        let err = (got - want).abs();
        if err >= worst.0 {
            worst = (err, name);
        }
    }
    Ok((
        worst.0 <= IDENTITY_TOL,
        format!("max abs err {:.2e} ({}), tol {IDENTITY_TOL:e}", worst.0, worst.1),
    ))
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::matrix(n, k, data).unwrap()
}

fn ensemble_structure() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut exact = true;
    let mut valid = true;
    let mut cases = 0;
    for _ in 0..200 {
        let n_branches = rng.random_range(1..7);
        let k = rng.random_range(2..8);
        let n = rng.random_range(1..10);
        let branches: Vec<Tensor> = (0..n_branches).map(|_| random_dist(&mut rng, n, k)).collect();
        let guidance = random_dist(&mut rng, n, k);
        let e = ensemble_predict(&branches, &guidance)?;
        let mut all = branches.clone();
        all.push(guidance.clone());
        let b = combine(&all, InferenceMode::BranchAverage)?;
        for ((got, g), m) in e.probs.data().iter().zip(guidance.data()).zip(b.data()) {
            exact &= *got == 0.5 * (g + m);
        }
        for row in e.probs.data().chunks(k) {
            valid &= row.iter().all(|&v| (0.0..=1.0).contains(&v)) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12;
        }
        cases += 1;
    }
    Ok((
        exact && valid,
        format!("{cases} random cases, exact half-half identity {exact}, valid distributions {valid}"),
    ))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Final-epoch records of one configuration over every seed.
struct SeedRuns {
    finals: Vec<MetricsRecord>,
    seconds: f64,
}

impl SeedRuns {
    fn collect(base: &RunConfig, ds: &MultiDomainDataset) -> Result<Self> {
        let started = Instant::now();
        let mut finals = Vec::new();
        for seed in SEEDS {
            let cfg = RunConfig { seed, ..base.clone() };
            let model = cfg.init_model(ds)?;
            let mut out = train(model, ds, &cfg)?;
            finals.push(out.metrics.pop().expect("at least one epoch"));
        }
        Ok(Self {
            finals,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    fn accuracy(&self, mode: InferenceMode) -> f64 {
        mean(
            &self
                .finals
                .iter()
                .map(|r| r.target_accuracy.get(mode))
                .collect::<Vec<_>>(),
        )
    }

    /// Seed-averaged probe accuracy per subnetwork, guidance last.
    fn probe(&self) -> Vec<f64> {
        let probes: Vec<&Vec<f64>> = self
            .finals
            .iter()
            .map(|r| r.probe_accuracy.as_ref().expect("final epoch is probed"))
            .collect();
        (0..probes[0].len())
            .map(|j| mean(&probes.iter().map(|p| p[j]).collect::<Vec<_>>()))
            .collect()
    }
}

struct Ring5 {
    full: SeedRuns,
    source_only: SeedRuns,
    no_mutual: SeedRuns,
}

fn source_only(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.hp = HyperParams {
        alpha: 0.0,
        beta: 0.0,
        lambda: 0.0,
    };
    cfg.flags.inference_mode = InferenceMode::GuidanceOnly;
    cfg
}

fn ring5_runs() -> Result<Ring5> {
    let base = RunConfig::default();
    let ds = base.dataset.load(None)?;
    Ok(Ring5 {
        full: SeedRuns::collect(&base, &ds)?,
        source_only: SeedRuns::collect(&source_only(&base), &ds)?,
        no_mutual: SeedRuns::collect(&TrainingVariant::NoMutual.config(&base, 0), &ds)?,
    })
}

fn end_to_end(runs: &Ring5) -> Result<(bool, String)> {
    let full = runs.full.accuracy(InferenceMode::Ensemble);
    let base = runs.source_only.accuracy(InferenceMode::GuidanceOnly);
    let gain = 100.0 * (full - base);
    let secs = runs.full.seconds + runs.source_only.seconds;
    let reproduced = (full - FROZEN_FULL).abs() <= FROZEN_TOL && (base - FROZEN_SOURCE_ONLY).abs() <= FROZEN_TOL;
    let pass = gain >= MIN_GAIN_POINTS && reproduced && secs < ADAPT_SECONDS;
    Ok((
        pass,
        format!(
            "full {full:.4} vs source-only {base:.4}: gain {gain:.2} pt (need >= {MIN_GAIN_POINTS}); frozen {FROZEN_FULL:.4}/{FROZEN_SOURCE_ONLY:.4} within {FROZEN_TOL}: {reproduced}; {secs:.1}s (limit {ADAPT_SECONDS}s)"
        ),
    ))
}

fn ablation_direction(runs: &Ring5) -> Result<(bool, String)> {
    let full = runs.full.accuracy(InferenceMode::Ensemble);
    let no_mutual = runs.no_mutual.accuracy(InferenceMode::Ensemble);
    let branch_avg = runs.full.accuracy(InferenceMode::BranchAverage);
    Ok((
        full >= no_mutual && full >= branch_avg,
        format!(
            "full {full:.4} >= w/o L_M {no_mutual:.4}: {}; full >= branch-average {branch_avg:.4}: {}",
            full >= no_mutual,
            full >= branch_avg
        ),
    ))
}

fn alignment(runs: &Ring5) -> Result<(bool, String)> {
    let adapted = runs.full.probe();
    let plain = runs.source_only.probe();
    let n = adapted.len() - 1;
    let lower: Vec<bool> = (0..n).map(|j| adapted[j] < plain[j]).collect();
    let fmt = |v: &[f64]| v.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(", ");
    Ok((
        lower.iter().all(|&b| b),
        format!(
            "branch probes adapted [{}] vs source-only [{}]; lower per branch {lower:?}",
            fmt(&adapted[..n]),
            fmt(&plain[..n])
        ),
    ))
}

fn determinism() -> Result<(bool, String)> {
    let mut cfg = RunConfig::default();
    cfg.optim.epochs = 3;
    cfg.seed = 17;
    let ds = cfg.dataset.load(None)?;
    let run = || -> Result<String> {
        let out = train(cfg.init_model(&ds)?, &ds, &cfg)?;
        Ok(out
            .metrics
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect())
    };
    let (a, b) = (run()?, run()?);
    Ok((
        a == b,
        format!(
            "two {}-epoch runs, {} bytes of metrics, identical {}",
            cfg.optim.epochs,
            a.len(),
            a == b
        ),
    ))
}

fn lr_schedule() -> Result<(bool, String)> {
    let got = [lr_at(0), lr_at(10), lr_at(25)];
    let want = [0.01, 0.001, 0.0001];
    Ok((got == want, format!("epochs 0/10/25 -> {got:?}")))
}

fn epoch_accounting(runs: &Ring5) -> Result<(bool, String)> {
    let mut ok = true;
    let mut notes = Vec::new();
    for (train_sizes, batch) in [(vec![500usize; 4], 64usize), (vec![37, 50, 13], 10), (vec![64, 64], 64)] {
        let mut specs: Vec<DomainSpec> = train_sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| DomainSpec {
                name: format!("s{i}"),
                rotation_deg: 15.0 * i as f64,
                translation: [0.0, 0.0],
                noise_sigma: 0.25,
                class_count: 3,
                samples_train: n,
                samples_test: 6,
                seed: i as u64,
            })
            .collect();
        specs.push(DomainSpec {
            name: "target".into(),
            samples_train: 200,
            ..specs[0].clone()
        });
        let data = generate_ring_domains(&specs)?;
        let total: usize = train_sizes.iter().sum();
        let expected = total.div_ceil(batch);
        let got = Sampler::new(&data.train_view(), batch, CombinedSampling::Proportional, 0)?.steps_per_epoch();
        ok &= got == expected;
        notes.push(format!("{total}/{batch} -> {got}"));
    }
    let recorded = runs.full.finals[0].steps;
    ok &= recorded == 2000usize.div_ceil(64);
    notes.push(format!("ring5 training epoch took {recorded} steps"));
    Ok((ok, notes.join(", ")))
}

fn main() -> ExitCode {
    let mut outcomes = vec![
        report("gradient correctness", gradient_correctness()),
        report("loss identities", loss_identities()),
        report("ensemble structure", ensemble_structure()),
    ];
    match ring5_runs() {
        Ok(runs) => {
            outcomes.push(report("end-to-end adaptation on ring5", end_to_end(&runs)));
            outcomes.push(report("ablation direction", ablation_direction(&runs)));
            outcomes.push(report("alignment diagnostic", alignment(&runs)));
            outcomes.push(report("determinism", determinism()));
            outcomes.push(report("learning-rate schedule", lr_schedule()));
            outcomes.push(report("epoch accounting", epoch_accounting(&runs)));
        }
        Err(e) => {
            for name in [
                "end-to-end adaptation on ring5",
                "ablation direction",
                "alignment diagnostic",
                "epoch accounting",
            ] {
                outcomes.push(report(name, Ok((false, format!("ring5 training failed: {e}")))));
            }
            outcomes.push(report("determinism", determinism()));
            outcomes.push(report("learning-rate schedule", lr_schedule()));
        }
    }
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "{} of {} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for o in failed {
            eprintln!("failed: {} ({})", o.name, o.detail);
        }
        ExitCode::FAILURE
    }
}
