use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SamplePattern;
use crate::error::{Error, Result};
use crate::hourglass::NetworkConfig;
use crate::tensor::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    /// Held-out scenes, generated from a separate stream.
    pub eval_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub objects: usize,
    pub pattern: SamplePattern,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 8,
            eval_scenes: 8,
            height: 32,
            width: 32,
            objects: 4,
            pattern: SamplePattern::Uniform { n: 100 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// The step size is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Stops training after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub bn_momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            epochs: 15,
            decay_every: 5,
            decay_factor: 0.5,
            batch_size: 2,
            max_steps: None,
            bn_momentum: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Runs are written to `<root>/<config hash prefix>/`.
    pub root: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { root: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub output: OutputConfig,
}


impl ExperimentConfig {
    /// Two units, 32×32 scenes, RASPN with four iterations, `k` repetitions.
    /// Training lasts `max_steps` steps with the step size halved three times.
    pub fn toy(seed: u64, repetitions: usize, max_steps: usize) -> Self {
        let mut cfg = ExperimentConfig {
            seed,
            ..Default::default()
        };
        cfg.network.hourglass.num_units = 2;
        cfg.network.hourglass.repetitions = repetitions;
        cfg.optimizer.max_steps = Some(max_steps);
        let steps_per_epoch = cfg.data.train_scenes.div_ceil(cfg.optimizer.batch_size);
        cfg.optimizer.epochs = max_steps.div_ceil(steps_per_epoch);
        cfg.optimizer.decay_every = (cfg.optimizer.epochs / 4).max(1);
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let d = &self.data;
        let m = self.network.hourglass.size_multiple();
        if d.height == 0 || d.width == 0 || !d.height.is_multiple_of(m) || !d.width.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "scene size {}x{} must be a positive multiple of {m}",
                d.height, d.width
            )));
        }
        if d.train_scenes == 0 {
            return Err(Error::Config("at least one training scene is required".into()));
        }
        let o = &self.optimizer;
        if o.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if o.decay_every == 0 {
            return Err(Error::Config("decay_every must be at least 1".into()));
        }
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", o.learning_rate)));
        }
        if !(0.0..=1.0).contains(&o.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum must lie in [0, 1], got {}", o.bn_momentum)));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.root.join(&self.hash()[..16])
    }

    /// An independent random stream for one purpose, derived from the seed.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        named_stream(self.seed, name)
    }
}

pub fn named_stream(seed: u64, name: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    let digest = Sha256::digest(name.as_bytes());
    let id = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
