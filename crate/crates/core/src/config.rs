//! Run configuration: everything that determines a training run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, CombinedSampling, MultiDomainDataset, RingBenchmark};
use crate::error::{Error, Result};
use crate::losses::HyperParams;
use crate::model::{init_model, ArchConfig, MlMsdaModel};
use crate::training::AblationFlags;

/// Hex digits kept from the SHA-256 of the canonical config.
pub const CONFIG_HASH_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// 0 gives plain SGD.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Ramp the reversed adversarial gradient linearly from 0 to full
    /// strength over the first epoch.
    pub adv_warmup: bool,
    pub combined_sampling: CombinedSampling,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
            adv_warmup: false,
            combined_sampling: CombinedSampling::Proportional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    /// Treat classifier outputs as constants inside the discriminator input.
    pub detach_preds: bool,
    /// Stop the mutual term from moving the guidance network.
    pub freeze_guidance_mutual: bool,
    /// Run the linear feature probe after every epoch instead of only the last.
    pub probe_every_epoch: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            detach_preds: true,
            freeze_guidance_mutual: false,
            probe_every_epoch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Ring(RingBenchmark),
    File { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self::Ring(RingBenchmark::ring5())
    }
}

impl DatasetSource {
    /// Generated datasets are rebuilt from their spec; file paths resolve
    /// against `base` when relative.
    pub fn load(&self, base: Option<&Path>) -> Result<MultiDomainDataset> {
        match self {
            Self::Ring(spec) => spec.generate(),
            Self::File { path } => match base {
                Some(b) if path.is_relative() => load_dataset(b.join(path)),
                _ => load_dataset(path),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Where `train` and `ablate` write their artifacts. Not part of the hash.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub hp: HyperParams,
    #[serde(default)]
    pub flags: AblationFlags,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub options: TrainOptions,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub dataset: DatasetSource,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/ring5")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            hp: HyperParams::default(),
            flags: AblationFlags::default(),
            optim: OptimConfig::default(),
            options: TrainOptions::default(),
            arch: ArchConfig::default(),
            dataset: DatasetSource::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.resolved_arch().validate()?;
        let m = self.optim.momentum;
        if !(0.0..1.0).contains(&m) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {m}")));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// The architecture actually built: the discriminator input width
    /// follows the conditioning flag.
    pub fn resolved_arch(&self) -> ArchConfig {
        ArchConfig {
            conditional_discriminator: !self.flags.no_condition_adv,
            ..self.arch.clone()
        }
    }

    /// Weights after the ablation switches are applied.
    pub fn effective_hp(&self) -> HyperParams {
        self.flags.apply(&self.hp)
    }

    /// Checks the architecture against a dataset.
    pub fn check_dataset(&self, ds: &MultiDomainDataset) -> Result<()> {
        let a = &self.arch;
        let pairs = [
            ("num_classes", a.num_classes, ds.num_classes),
            ("input_dim", a.input_dim, ds.input_dim),
            ("num_sources", a.num_sources, ds.num_sources()),
        ];
        for (what, cfg, data) in pairs {
            if cfg != data {
                return Err(Error::Incompatible(format!(
                    "arch.{what} = {cfg} but the dataset has {data}"
                )));
            }
        }
        Ok(())
    }

    pub fn init_model(&self, ds: &MultiDomainDataset) -> Result<MlMsdaModel> {
        self.check_dataset(ds)?;
        init_model(&self.resolved_arch(), derive_seed(self.seed, SeedStream::Init))
    }

    /// Short SHA-256 over the canonical JSON form, with `output_dir` blanked
    /// so relocating a run does not change its identity.
    pub fn config_hash(&self) -> String {
        let canonical = RunConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)[..CONFIG_HASH_LEN].to_string()
    }
}

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Init,
    Sampler,
    Probe,
}

pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64 + 1);
    rng.next_u64()
}
