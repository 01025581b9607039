use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny(share_trunk: bool) -> ArchConfig {
    ArchConfig {
        input_dim: 2,
        trunk_layers: vec![4],
        private_layers: vec![5],
        feature_dim: 3,
        num_classes: 3,
        num_sources: 2,
        share_trunk,
        discriminator_layers: vec![4],
        conditional_discriminator: true,
    }
}

fn random_batch(b: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![b, cols],
        (0..b * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = init_model(&tiny(false), 9).unwrap();
    let b = init_model(&tiny(false), 9).unwrap();
    let c = init_model(&tiny(false), 10).unwrap();
    let bits = |m: &MlMsdaModel| -> Vec<u64> {
        m.params()
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn glorot_bounds_and_zero_biases() {
    let m = init_model(&tiny(false), 1).unwrap();
    for p in m.params() {
        if p.name.ends_with(".bias") {
            assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
        } else {
            let (fan_in, fan_out) = p.value.dims2().unwrap();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            assert!(p.value.data().iter().all(|v| v.abs() <= limit), "{}", p.name);
        }
    }
}

#[test]
fn invalid_arch_is_rejected() {
    let mut cfg = tiny(false);
    cfg.num_classes = 1;
    assert!(matches!(init_model(&cfg, 0), Err(Error::Config(_))));
    let mut cfg = tiny(false);
    cfg.num_sources = 0;
    assert!(init_model(&cfg, 0).is_err());
    let mut cfg = tiny(false);
    cfg.feature_dim = 0;
    assert!(init_model(&cfg, 0).is_err());
}

#[test]
fn shared_trunk_is_one_storage_slot() {
    let mut m = init_model(&tiny(true), 3).unwrap();
    let first = m.subnet(0).unwrap().trunk_slots();
    for j in 1..m.subnet_count() {
        assert_eq!(m.subnet(j).unwrap().trunk_slots(), first);
    }
    let x = random_batch(5, 2, 1);
    // mutating the shared slot is visible from every subnetwork
    m.params_mut()[first[1]].value.data_mut()[0] += 0.75;
    let tape = Tape::new();
    let g = m.bind_frozen(&tape);
    let xv = tape.constant(x);
    let reference = g.trunk(0, &xv).unwrap().to_tensor();
    for j in 1..m.subnet_count() {
        assert_eq!(g.trunk(j, &xv).unwrap().to_tensor(), reference);
    }
}

#[test]
fn unshared_trunks_are_disjoint() {
    let m = init_model(&tiny(false), 3).unwrap();
    let mut seen = std::collections::HashSet::new();
    for j in 0..m.subnet_count() {
        for slot in m.subnet(j).unwrap().trunk_slots() {
            assert!(seen.insert(slot), "slot {slot} reused");
        }
    }
    assert_eq!(seen.len(), 2 * m.subnet_count());
}

#[test]
fn zero_model_gives_zero_features_uniform_preds_half_discriminator() {
    let m = MlMsdaModel::zeros(&tiny(false)).unwrap();
    let x = random_batch(7, 2, 2);
    let f = m.features(1, &x).unwrap();
    assert_eq!(f.shape(), &[7, 3]);
    assert!(f.data().iter().all(|&v| v == 0.0));
    let p = m.predict(1, &x).unwrap();
    assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    let tape = Tape::new();
    let g = m.bind_frozen(&tape);
    let c = tape.constant(random_batch(4, 9, 3));
    let d = g.discriminate(0, &c, 1.0).unwrap();
    assert_eq!(d.shape(), vec![4, 1]);
    assert!(d.value().data().iter().all(|&v| v == 0.5));
}

#[test]
fn subnet_index_out_of_range() {
    let m = init_model(&tiny(false), 0).unwrap();
    let x = random_batch(2, 2, 0);
    assert!(matches!(
        m.features(3, &x),
        Err(Error::SubnetIndex { index: 3, count: 3 })
    ));
}

#[test]
fn classify_rejects_wrong_width_and_is_shift_invariant() {
    let mut m = init_model(&tiny(false), 4).unwrap();
    let x = random_batch(6, 2, 5);
    let tape = Tape::new();
    let g = m.bind_frozen(&tape);
    assert!(g.classify(0, &tape.constant(random_batch(2, 4, 0))).is_err());
    let before = m.predict(0, &x).unwrap();

    let bias = m
        .subnet(0)
        .unwrap()
        .private_and_classifier_slots()
        .last()
        .copied()
        .unwrap();
    m.params_mut()[bias].value.data_mut().iter_mut().for_each(|b| *b += 3.0);
    let after = m.predict(0, &x).unwrap();
    for i in 0..6 {
        let argmax = |r: &[f64]| {
            r.iter()
                .enumerate()
                .fold(0, |best, (k, v)| if *v > r[best] { k } else { best })
        };
        assert_eq!(argmax(before.row(i)), argmax(after.row(i)));
        for (a, b) in before.row(i).iter().zip(after.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn condition_examples() {
    let tape = Tape::new();
    let f = tape.param(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
    let p = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
    assert_eq!(condition(&f, &p, true).unwrap().value().data(), &[1.0, 0.0, 2.0, 0.0]);

    let p = tape.constant(Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
    assert_eq!(condition(&f, &p, false).unwrap().value().data(), &[0.5, 0.5, 1.0, 1.0]);
}

#[test]
fn detached_condition_blocks_gradient_to_logits() {
    let m = init_model(&tiny(false), 7).unwrap();
    for detach in [true, false] {
        let tape = Tape::new();
        let g = m.bind(&tape);
        let f = g.extract(0, &tape.constant(random_batch(4, 2, 8))).unwrap();
        let logits = g.logits(0, &f).unwrap();
        let p = logits.softmax_rows().unwrap();
        let c = condition(&f, &p, detach).unwrap();
        let loss = g.discriminate(0, &c, 1.0).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        let classifier_grad = logits.grad();
        if detach {
            assert!(classifier_grad.is_none());
        } else {
            assert!(classifier_grad.unwrap().data().iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn zero_adv_scale_cuts_extractor_gradient() {
    let m = init_model(&tiny(false), 7).unwrap();
    let tape = Tape::new();
    let g = m.bind(&tape);
    let f = g.extract(0, &tape.constant(random_batch(4, 2, 8))).unwrap();
    let p = g.classify(0, &f).unwrap();
    let d = g.discriminate(0, &condition(&f, &p, true).unwrap(), 0.0).unwrap();
    assert!(d.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    tape.backward(d.sum().unwrap()).unwrap();
    let grads = g.grads();
    let net = m.subnet(0).unwrap();
    for slot in net.trunk_slots().into_iter().chain(net.private_and_classifier_slots()) {
        assert!(
            grads[slot].data().iter().all(|&v| v == 0.0),
            "{}",
            m.params()[slot].name
        );
    }
    assert!(net
        .discriminator_slots()
        .iter()
        .any(|&s| grads[s].data().iter().any(|&v| v != 0.0)));
}

fn inputs<'t>(tape: &'t Tape, n_subnets: usize, b_src: usize, b_tgt: usize) -> ForwardInputs<'t> {
    ForwardInputs {
        sources: (0..n_subnets)
            .map(|j| tape.constant(random_batch(b_src + j, 2, 100 + j as u64)))
            .collect(),
        target: tape.constant(random_batch(b_tgt, 2, 99)),
    }
}

#[test]
fn forward_all_cardinality_wiring_and_shapes() {
    let m = init_model(&tiny(false), 11).unwrap();
    let tape = Tape::new();
    let g = m.bind(&tape);
    let inp = inputs(&tape, 3, 4, 6);
    let out = g.forward_all(&inp, &ForwardOptions::default()).unwrap();
    assert_eq!(out.len(), 3);
    for (j, o) in out.iter().enumerate() {
        assert_eq!(o.source_features.shape(), vec![4 + j, 3]);
        assert_eq!(o.target_features.shape(), vec![6, 3]);
        assert_eq!(o.source_probs.shape(), vec![4 + j, 3]);
        assert_eq!(o.d_source.shape(), vec![4 + j, 1]);
        assert_eq!(o.d_target.shape(), vec![6, 1]);
        let direct = m.predict(j, &inp.target.to_tensor()).unwrap();
        assert_eq!(o.target_probs.to_tensor(), direct);
    }
    // missing batch
    let short = ForwardInputs {
        sources: inp.sources[..2].to_vec(),
        target: inp.target,
    };
    assert!(g.forward_all(&short, &ForwardOptions::default()).is_err());
}

#[test]
fn unconditioned_discriminator_sees_bare_features() {
    let mut cfg = tiny(false);
    cfg.conditional_discriminator = false;
    assert_eq!(cfg.discriminator_input_dim(), 3);
    let m = init_model(&cfg, 2).unwrap();
    let tape = Tape::new();
    let g = m.bind(&tape);
    let inp = inputs(&tape, 3, 4, 4);
    let opts = ForwardOptions {
        condition_adv: false,
        ..ForwardOptions::default()
    };
    assert_eq!(g.forward_all(&inp, &opts).unwrap().len(), 3);
    // wiring and architecture must agree
    assert!(matches!(
        g.forward_all(&inp, &ForwardOptions::default()),
        Err(Error::Incompatible(_))
    ));
}

#[test]
fn shared_trunk_gradient_is_sum_of_per_subnetwork_gradients() {
    let m = init_model(&tiny(true), 21).unwrap();
    let x = random_batch(5, 2, 22);
    let weights: Vec<Tensor> = (0..3).map(|j| random_batch(5, 3, 30 + j)).collect();
    let per_subnet = |tape: &Tape, subnets: &[usize]| -> Vec<Tensor> {
        let g = m.bind(tape);
        let xv = tape.constant(x.clone());
        let mut total = None;
        for &j in subnets {
            let f = g.extract(j, &xv).unwrap();
            let term = f.mul(&tape.constant(weights[j].clone())).unwrap().sum().unwrap();
            total = Some(match total {
                None => term,
                Some(t) => term.add(&t).unwrap(),
            });
        }
        tape.backward(total.unwrap()).unwrap();
        g.grads()
    };
    let joint = per_subnet(&Tape::new(), &[0, 1, 2]);
    let slots = m.subnet(0).unwrap().trunk_slots();
    for slot in slots {
        let separate: Vec<f64> =
            (0..3)
                .map(|j| per_subnet(&Tape::new(), &[j]))
                .fold(vec![0.0; joint[slot].numel()], |mut acc, g| {
                    acc.iter_mut().zip(g[slot].data()).for_each(|(a, v)| *a += v);
                    acc
                });
        for (a, b) in joint[slot].data().iter().zip(&separate) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let m = init_model(&tiny(true), 5).unwrap();
    let bytes = write_checkpoint(&m, "abc123").unwrap();
    let (loaded, hash) = read_checkpoint(&bytes).unwrap();
    assert_eq!(hash, "abc123");
    assert_eq!(loaded, m);
    assert_eq!(write_checkpoint(&loaded, &hash).unwrap(), bytes);
}

#[test]
fn checkpoint_rejects_truncation_and_version() {
    let m = init_model(&tiny(false), 5).unwrap();
    let bytes = write_checkpoint(&m, "h").unwrap();
    assert!(matches!(
        read_checkpoint(&bytes[..bytes.len() - 3]),
        Err(Error::Malformed(_))
    ));
    let mut bad = bytes.clone();
    bad[8] = 99;
    assert!(matches!(read_checkpoint(&bad), Err(Error::Version { found: 99, .. })));
    let mut extra = bytes;
    extra.push(0);
    assert!(read_checkpoint(&extra).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn predictions_are_distributions(seed in 0u64..10_000, b in 1usize..9) {
        let m = init_model(&tiny(seed % 2 == 0), seed).unwrap();
        let x = random_batch(b, 2, seed ^ 0xabc);
        for j in 0..m.subnet_count() {
            let p = m.predict(j, &x).unwrap();
            for i in 0..b {
                prop_assert!(p.row(i).iter().all(|&v| v >= 0.0));
                prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn bind_vars_checks_count_and_shapes() {
    let model = init_model(&tiny(false), 1).unwrap();
    let tape = Tape::new();
    let vars: Vec<_> = model.params().iter().map(|p| tape.param(p.value.clone())).collect();
    assert!(model.bind_vars(&tape, vars[1..].to_vec()).is_err());
    let mut swapped = vars.clone();
    swapped.swap(0, 1);
    assert!(model.bind_vars(&tape, swapped).is_err());
    let g = model.bind_vars(&tape, vars).unwrap();
    let x = random_batch(3, 2, 0);
    let f = g.extract(0, &tape.constant(x.clone())).unwrap();
    assert_eq!(f.to_tensor(), model.features(0, &x).unwrap());
}
