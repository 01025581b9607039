//! Binary dataset files. The layout is documented in `docs/formats.md`.

use std::fs;
use std::path::Path;

use super::{DomainSpec, FeatureSplit, LabeledSplit, MultiDomainDataset, SourceDomain, TargetDomain};
use crate::autodiff::Tensor;
use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MLMSDADS";
pub const DATASET_VERSION: u32 = 1;

const ROLE_SOURCE: u8 = 0;
const ROLE_TARGET: u8 = 1;

struct DomainEntry {
    role: u8,
    spec: DomainSpec,
    n_train: usize,
    n_test: usize,
    train_labeled: bool,
}

fn encode_entry(e: &mut Encoder, role: u8, spec: &DomainSpec, n_train: usize, n_test: usize, train_labeled: bool) {
    e.u8(role);
    e.str(&spec.name);
    e.u32(spec.class_count as u32);
    e.f64(spec.rotation_deg);
    e.f64(spec.translation[0]);
    e.f64(spec.translation[1]);
    e.f64(spec.noise_sigma);
    e.u64(spec.seed);
    e.u32(n_train as u32);
    e.u32(n_test as u32);
    e.u8(train_labeled as u8);
}

fn encode_labeled(e: &mut Encoder, split: &LabeledSplit) {
    e.f64s(split.x.data());
    split.y.iter().for_each(|&y| e.u32(y as u32));
}

pub fn write_dataset(ds: &MultiDomainDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut e = Encoder::default();
    e.bytes(MAGIC);
    e.u32(DATASET_VERSION);
    e.u32(ds.num_classes as u32);
    e.u32(ds.input_dim as u32);
    e.u32(ds.sources.len() as u32 + 1);
    for s in &ds.sources {
        encode_entry(&mut e, ROLE_SOURCE, &s.spec, s.train.len(), s.test.len(), true);
    }
    let t = &ds.target;
    encode_entry(&mut e, ROLE_TARGET, &t.spec, t.train.len(), t.test.len(), false);
    for s in &ds.sources {
        encode_labeled(&mut e, &s.train);
        encode_labeled(&mut e, &s.test);
    }
    e.f64s(t.train.x.data());
    encode_labeled(&mut e, &t.test);
    Ok(e.buf)
}

fn decode_entry(d: &mut Decoder<'_>) -> Result<DomainEntry> {
    let role = d.u8()?;
    if role != ROLE_SOURCE && role != ROLE_TARGET {
        return Err(Error::Malformed(format!("unknown domain role {role}")));
    }
    let name = d.str()?;
    let class_count = d.u32()? as usize;
    let rotation_deg = d.f64()?;
    let translation = [d.f64()?, d.f64()?];
    let noise_sigma = d.f64()?;
    let seed = d.u64()?;
    let n_train = d.u32()? as usize;
    let n_test = d.u32()? as usize;
    let train_labeled = match d.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Malformed(format!("bad label flag {other}"))),
    };
    Ok(DomainEntry {
        role,
        spec: DomainSpec {
            name,
            rotation_deg,
            translation,
            noise_sigma,
            class_count,
            samples_train: n_train,
            samples_test: n_test,
            seed,
        },
        n_train,
        n_test,
        train_labeled,
    })
}

fn decode_labeled(d: &mut Decoder<'_>, n: usize, dim: usize) -> Result<LabeledSplit> {
    let x = Tensor::matrix(n, dim, d.f64s(n * dim)?)?;
    let y = (0..n).map(|_| d.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    Ok(LabeledSplit { x, y })
}

pub fn read_dataset(bytes: &[u8]) -> Result<MultiDomainDataset> {
    let mut d = Decoder::new(bytes);
    if d.take(MAGIC.len())? != MAGIC {
        return Err(Error::Malformed("not a dataset file (bad magic)".into()));
    }
    let version = d.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let num_classes = d.u32()? as usize;
    let input_dim = d.u32()? as usize;
    let n_domains = d.u32()? as usize;
    if n_domains < 2 {
        return Err(Error::Malformed(format!("{n_domains} domains, need at least 2")));
    }
    let entries = (0..n_domains)
        .map(|_| decode_entry(&mut d))
        .collect::<Result<Vec<_>>>()?;
    let (target_entry, source_entries) = entries.split_last().expect("n_domains >= 2");
    if target_entry.role != ROLE_TARGET || target_entry.train_labeled {
        return Err(Error::Malformed("last domain must be the unlabeled target".into()));
    }
    if source_entries.iter().any(|e| e.role != ROLE_SOURCE || !e.train_labeled) {
        return Err(Error::Malformed(
            "all but the last domain must be labeled sources".into(),
        ));
    }
    if let Some(bad) = entries.iter().find(|e| e.spec.class_count != num_classes) {
        return Err(Error::Incompatible(format!(
            "domain {} declares {} classes, header declares {num_classes}",
            bad.spec.name, bad.spec.class_count
        )));
    }

    let sources = source_entries
        .iter()
        .map(|e| {
            Ok(SourceDomain {
                spec: e.spec.clone(),
                train: decode_labeled(&mut d, e.n_train, input_dim)?,
                test: decode_labeled(&mut d, e.n_test, input_dim)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = target_entry.n_train;
    let target = TargetDomain {
        spec: target_entry.spec.clone(),
        train: FeatureSplit {
            x: Tensor::matrix(n, input_dim, d.f64s(n * input_dim)?)?,
        },
        test: decode_labeled(&mut d, target_entry.n_test, input_dim)?,
    };
    d.finish()?;
    let ds = MultiDomainDataset {
        num_classes,
        input_dim,
        sources,
        target,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &MultiDomainDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<MultiDomainDataset> {
    read_dataset(&fs::read(path)?)
}
