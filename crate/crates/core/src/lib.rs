//! Mutual-learning multi-source domain adaptation.
//!
//! N branch subnetworks each align one labeled source domain with the
//! unlabeled target through a conditional adversarial discriminator; a
//! guidance subnetwork does the same for the union of all sources. Branch
//! and guidance target predictions are tied together by a symmetric KL
//! penalty, and inference averages the guidance prediction with the branch
//! mean.
//!
//! Everything runs on the small reverse-mode engine in [`autodiff`].

pub mod autodiff;
mod codec;
pub mod config;
pub mod data;
mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, Result};
