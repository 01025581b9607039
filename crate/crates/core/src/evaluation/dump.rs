//! Feature dumps as comma-separated text.
//!
//! ```text
//! # config_hash=<hash> subnet=<j>
//! domain,role,split,label,f0,f1,...
//! 0,source,train,2,0.113,...
//! ```
//! `label` is empty for target training rows.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::MultiDomainDataset;
use crate::error::Result;
use crate::model::MlMsdaModel;

fn push_rows(out: &mut String, domain: usize, role: &str, split: &str, feats: &Tensor, labels: Option<&[usize]>) {
    for i in 0..feats.shape()[0] {
        let label = labels.map(|y| y[i].to_string()).unwrap_or_default();
        write!(out, "{domain},{role},{split},{label}").expect("write to String");
        for v in feats.row(i) {
            write!(out, ",{v}").expect("write to String");
        }
        out.push('\n');
    }
}

/// Renders extractor `subnet`'s features for every split of every domain.
/// Sources come first in domain order, the target last; `f64` values use
/// the shortest round-tripping representation.
pub fn write_feature_dump(
    model: &MlMsdaModel,
    ds: &MultiDomainDataset,
    subnet: usize,
    config_hash: &str,
) -> Result<String> {
    model.subnet(subnet)?;
    let d = model.config().feature_dim;
    let mut out = format!("# config_hash={config_hash} subnet={subnet}\ndomain,role,split,label");
    for c in 0..d {
        write!(out, ",f{c}").expect("write to String");
    }
    out.push('\n');
    for (i, s) in ds.sources.iter().enumerate() {
        push_rows(
            &mut out,
            i,
            "source",
            "train",
            &model.features(subnet, &s.train.x)?,
            Some(&s.train.y),
        );
        push_rows(
            &mut out,
            i,
            "source",
            "test",
            &model.features(subnet, &s.test.x)?,
            Some(&s.test.y),
        );
    }
    let t = ds.num_sources();
    push_rows(
        &mut out,
        t,
        "target",
        "train",
        &model.features(subnet, &ds.target.train.x)?,
        None,
    );
    push_rows(
        &mut out,
        t,
        "target",
        "test",
        &model.features(subnet, &ds.target.test.x)?,
        Some(&ds.target.test.y),
    );
    Ok(out)
}

pub fn dump_features(
    model: &MlMsdaModel,
    ds: &MultiDomainDataset,
    subnet: usize,
    config_hash: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, write_feature_dump(model, ds, subnet, config_hash)?)?;
    Ok(())
}
