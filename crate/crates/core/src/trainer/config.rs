use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balancer::{Mechanism, Statistic, DEFAULT_BIAS_STEP};
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::moe::validate_dims;
use crate::Potential;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub d: usize,
    pub d_ffn: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            experts: 8,
            top_k: 2,
            d: 16,
            d_ffn: 32,
        }
    }
}

/// Which balancing mechanism every layer runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Phi,
    StMoe,
    LossFree,
}

impl MechanismKind {
    pub fn token(self) -> &'static str {
        match self {
            MechanismKind::Phi => "phi",
            MechanismKind::StMoe => "st_moe",
            MechanismKind::LossFree => "loss_free",
        }
    }
}

impl std::str::FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phi" => Ok(MechanismKind::Phi),
            "st_moe" => Ok(MechanismKind::StMoe),
            "loss_free" => Ok(MechanismKind::LossFree),
            other => Err(Error::Config(format!("unknown mechanism `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceConfig {
    pub mechanism: MechanismKind,
    pub phi: Potential,
    pub eta: f64,
    /// Auxiliary coefficient; the loss adds `alpha · E · Σ aux`.
    pub alpha: f64,
    pub statistic: Statistic,
    /// Loss-free bias step `u`.
    pub bias_step: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            mechanism: MechanismKind::Phi,
            phi: Potential::neg_shannon(),
            eta: 0.7,
            alpha: 0.01,
            statistic: Statistic::Probability,
            bias_step: DEFAULT_BIAS_STEP,
        }
    }
}

impl BalanceConfig {
    pub fn mechanism(&self) -> Mechanism {
        match self.mechanism {
            MechanismKind::Phi => Mechanism::PhiBalancing(self.phi),
            MechanismKind::StMoe => Mechanism::StMoe,
            MechanismKind::LossFree => Mechanism::LossFree {
                bias_step: self.bias_step,
            },
        }
    }
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    #[serde(rename = "adamw")]
    AdamW {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default)]
        warmup_steps: u64,
        /// Cosine decay to zero after warmup instead of a constant rate.
        #[serde(default)]
        cosine: bool,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::AdamW {
            lr: 3e-3,
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
            weight_decay: 0.0,
            warmup_steps: 100,
            cosine: false,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::AdamW { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if let OptimizerConfig::AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = *self
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
            }
            if !(eps > 0.0) || !(weight_decay >= 0.0) {
                return Err(Error::Config("AdamW needs eps > 0 and weight_decay >= 0".into()));
            }
        }
        Ok(())
    }
}

fn default_corpus() -> CorpusSpec {
    CorpusSpec::new(4, ModelConfig::default().d)
}

/// Everything that determines one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "TrainConfig::default_steps")]
    pub steps: u64,
    #[serde(default = "TrainConfig::default_eval_every")]
    pub eval_every: u64,
    /// Steps of routing loads accumulated for MaxVio and Gini, and of
    /// losses averaged for the reported task loss and accuracy.
    #[serde(default = "TrainConfig::default_window")]
    pub window: usize,
    /// Tokens per batch.
    #[serde(default = "TrainConfig::default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub balance: BalanceConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_corpus")]
    pub corpus: CorpusSpec,
    /// Per-op NaN/Inf guards on the tape. Off, non-finite values are only
    /// caught at the loss, gradients and parameters.
    #[serde(default = "yes")]
    pub checked: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: Self::default_steps(),
            eval_every: Self::default_eval_every(),
            window: Self::default_window(),
            batch: Self::default_batch(),
            model: ModelConfig::default(),
            balance: BalanceConfig::default(),
            optimizer: OptimizerConfig::default(),
            corpus: default_corpus(),
            checked: true,
        }
    }
}

impl TrainConfig {
    fn default_steps() -> u64 {
        2000
    }
    fn default_eval_every() -> u64 {
        100
    }
    fn default_window() -> usize {
        200
    }
    fn default_batch() -> usize {
        64
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.eval_every == 0 || self.eval_every > self.steps {
            return Err(Error::Config(format!(
                "eval_every must lie in 1..={}, got {}",
                self.steps, self.eval_every
            )));
        }
        if self.window == 0 || self.batch == 0 {
            return Err(Error::Config("window and batch must be positive".into()));
        }
        let m = &self.model;
        if m.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        validate_dims(m.experts, m.top_k, m.d, m.d_ffn)?;
        if self.corpus.dim != m.d {
            return Err(Error::Config(format!(
                "corpus dim {} differs from model d {}",
                self.corpus.dim, m.d
            )));
        }
        self.corpus.validate()?;
        self.optimizer.validate()?;
        let b = &self.balance;
        if !(b.eta > 0.0 && b.eta <= 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1], got {}", b.eta)));
        }
        if !(b.alpha >= 0.0 && b.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", b.alpha)));
        }
        if !(b.bias_step > 0.0 && b.bias_step.is_finite()) {
            return Err(Error::Config(format!("bias_step must be positive, got {}", b.bias_step)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}
