use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::objectives::LossHyper;

/// Named hyperparameter presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Sized for the toy encoder on one CPU.
    Desk,
    /// The published settings for a 278M-parameter encoder.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::InvalidArgument(format!(
                "unknown profile {other:?} (expected desk or paper)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub mask_prob: f64,
    pub max_len: usize,
    /// Pairs per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub grad_accum: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub temperature: f64,
    /// Standard deviation of freshly initialized weights.
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            mask_prob: 0.15,
            max_len: 64,
            batch_size: 8,
            grad_accum: 1,
            epochs: 20,
            checkpoint_every: 50,
            seed: 42,
            temperature: 1.0,
            init_std: 0.05,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            lr: 2e-5,
            max_len: 512,
            batch_size: 64,
            grad_accum: 8,
            epochs: 2,
            checkpoint_every: 2000,
            init_std: 0.02,
            ..Self::desk()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn loss_hyper(&self) -> LossHyper {
        LossHyper {
            mask_prob: self.mask_prob,
            temperature: self.temperature,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("temperature", self.temperature),
            ("init_std", self.init_std),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::InvalidArgument("betas must be below 1".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight_decay {} is negative",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidArgument(format!(
                "mask_prob {} outside [0, 1]",
                self.mask_prob
            )));
        }
        if self.max_len < 5 {
            return Err(Error::InvalidArgument(format!("max_len {} below 5", self.max_len)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("grad_accum", self.grad_accum),
            ("epochs", self.epochs),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Flat `key=value` text, one field per line.
    pub fn to_kv(&self) -> String {
        format!(
            "lr={}\nbeta1={}\nbeta2={}\neps={}\nweight_decay={}\nmask_prob={}\nmax_len={}\nbatch_size={}\n\
             grad_accum={}\nepochs={}\ncheckpoint_every={}\nseed={}\ntemperature={}\ninit_std={}\n",
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
            self.mask_prob,
            self.max_len,
            self.batch_size,
            self.grad_accum,
            self.epochs,
            self.checkpoint_every,
            self.seed,
            self.temperature,
            self.init_std
        )
    }

    /// Reads overrides on top of `base`; unknown keys are rejected.
    pub fn parse_over(base: TrainConfig, text: &str, origin: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text, origin)?;
        let mut c = base;
        macro_rules! field {
            ($($name:ident),*) => {
                $(if let Some(v) = kv.take(stringify!($name))? { c.$name = v; })*
            };
        }
        field!(
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            mask_prob,
            max_len,
            batch_size,
            grad_accum,
            epochs,
            checkpoint_every,
            seed,
            temperature,
            init_std
        );
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load_over(base: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_over(base, &text, &path.display().to_string())
    }
}
