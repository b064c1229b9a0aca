//! End-to-end training of the toy MoE model.
//!
//! Each step samples a batch, routes it through every layer, advances the
//! per-layer EMA trackers, adds the balancing terms to the task loss,
//! backpropagates and applies the optimizer. Balance metrics are computed
//! over a sliding window of routed-token counts.

mod budget;
mod config;
mod model;
mod optim;

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use budget::{compute_token_budget, TokenBudget};
pub use config::{BalanceConfig, MechanismKind, ModelConfig, OptimizerConfig, TrainConfig};
pub use model::{ForwardPass, Model, PriceMode, Task};
pub use optim::{learning_rate, optimizer_step, OptimizerState};

use crate::autodiff::Tensor;
use crate::balancer::{BalancerState, Mechanism};
use crate::corpus::{Corpus, LabelRule};
use crate::error::{Error, Result};
use crate::metrics::{gini, max_vio, LoadWindow};

/// Balance metrics of one layer at an evaluation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub max_vio: f64,
    pub gini: f64,
    /// Digest of the layer's EMA vector.
    pub m_hash: String,
}

/// One evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    /// Mean over the metric window.
    pub task_loss: f64,
    pub accuracy: f64,
    pub layers: Vec<LayerMetrics>,
}

/// Evaluation history of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<EvalRow>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&EvalRow> {
        self.rows.last()
    }

    /// Layer-mean MaxVio at the final evaluation.
    pub fn terminal_max_vio(&self) -> Option<f64> {
        let row = self.last()?;
        Some(row.layers.iter().map(|l| l.max_vio).sum::<f64>() / row.layers.len() as f64)
    }

    pub fn terminal_task_loss(&self) -> Option<f64> {
        self.last().map(|r| r.task_loss)
    }

    /// SHA-256 over the exact bits of every row.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update(r.step.to_le_bytes());
            h.update(r.task_loss.to_bits().to_le_bytes());
            h.update(r.accuracy.to_bits().to_le_bytes());
            for l in &r.layers {
                h.update(l.max_vio.to_bits().to_le_bytes());
                h.update(l.gini.to_bits().to_le_bytes());
                h.update(l.m_hash.as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn hash_vector(v: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_bits().to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Losses and accuracy observed at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub task_loss: f64,
    pub total_loss: f64,
    pub accuracy: f64,
}

/// Complete resumable state of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerSnapshot {
    pub version: u32,
    pub config_hash: String,
    pub step: u64,
    pub params: Vec<Tensor>,
    pub optimizer: OptimizerState,
    pub balancers: Vec<BalancerState>,
    pub load_windows: Vec<LoadWindow>,
    pub loss_window: VecDeque<(f64, f64)>,
    pub record: RunRecord,
}

const SNAPSHOT_VERSION: u32 = 1;

/// Resumable training loop. Batches depend only on `(seed, step)`, so the
/// step counter is the whole sampling state.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    corpus: Corpus,
    model: Model,
    optimizer: OptimizerState,
    balancers: Vec<BalancerState>,
    load_windows: Vec<LoadWindow>,
    loss_window: VecDeque<(f64, f64)>,
    step: u64,
    record: RunRecord,
}

fn task_for(config: &TrainConfig) -> Task {
    match config.corpus.label {
        LabelRule::DomainId => Task::Classification {
            classes: config.corpus.domains,
        },
        LabelRule::LinearTeacher { outputs } => Task::Regression { outputs },
    }
}

fn balancers_for(config: &TrainConfig) -> Result<Vec<BalancerState>> {
    let b = &config.balance;
    (0..config.model.layers)
        .map(|_| BalancerState::new(config.model.experts, b.eta, b.alpha, b.statistic, b.mechanism()))
        .collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let corpus = config
            .corpus
            .clone()
            .with_seed(config.corpus.seed.unwrap_or(config.seed))
            .build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Model::init(&config.model, task_for(&config), &mut rng)?;
        model.set_checked(config.checked);
        let optimizer = OptimizerState::new(model.params());
        let balancers = balancers_for(&config)?;
        let load_windows = (0..config.model.layers).map(|_| LoadWindow::new(config.window)).collect();
        Ok(Self {
            corpus,
            model,
            optimizer,
            balancers,
            load_windows,
            loss_window: VecDeque::new(),
            step: 0,
            record: RunRecord::default(),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn balancers(&self) -> &[BalancerState] {
        &self.balancers
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Runs one training step. On a non-finite value the state is left as it
    /// was before the step.
    pub fn step_once(&mut self) -> Result<StepReport> {
        let t = self.step + 1;
        let numerical = |e: Error| match e {
            Error::NonFinite(op) => Error::Numerical {
                step: t,
                reason: format!("non-finite value in {op}"),
            },
            other => other,
        };
        let batch = self.corpus.sample_batch(self.config.batch, t)?;
        let mut balancers = self.balancers.clone();
        let pass = self
            .model
            .forward(&batch, &mut balancers, self.config.balance.alpha, PriceMode::Tracked)
            .map_err(numerical)?;
        let total = pass.total_loss();
        if !total.is_finite() {
            return Err(Error::Numerical {
                step: t,
                reason: format!("total loss is {total}"),
            });
        }
        let grads = pass.gradients(pass.total).map_err(numerical)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                step: t,
                reason: "non-finite gradient".into(),
            });
        }
        let mut params = self.model.params().to_vec();
        let mut optimizer = self.optimizer.clone();
        optimizer_step(&self.config.optimizer, &mut params, &grads, &mut optimizer, self.config.steps)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical {
                step: t,
                reason: "non-finite parameter after update".into(),
            });
        }

        for (state, r) in balancers.iter_mut().zip(&pass.routed) {
            if let Mechanism::LossFree { .. } = state.mechanism() {
                state.loss_free_step(&r.batch.f())?;
            }
        }
        for (w, r) in self.load_windows.iter_mut().zip(&pass.routed) {
            w.push(r.batch.counts().iter().map(|&c| c as f64).collect());
        }
        if self.loss_window.len() == self.config.window {
            self.loss_window.pop_front();
        }
        let report = StepReport {
            step: t,
            task_loss: pass.task_loss(),
            total_loss: total,
            accuracy: pass.accuracy,
        };
        self.loss_window.push_back((report.task_loss, report.accuracy));
        self.model.params_mut().clone_from_slice(&params);
        self.optimizer = optimizer;
        self.balancers = balancers;
        self.step = t;
        if t.is_multiple_of(self.config.eval_every) || t == self.config.steps {
            let row = self.evaluate()?;
            self.record.rows.push(row);
        }
        Ok(report)
    }

    fn evaluate(&self) -> Result<EvalRow> {
        let n = self.loss_window.len() as f64;
        let (loss, acc) = self
            .loss_window
            .iter()
            .fold((0.0, 0.0), |(l, a), &(x, y)| (l + x, a + y));
        let layers = self
            .load_windows
            .iter()
            .zip(&self.balancers)
            .map(|(w, b)| {
                let loads = w.totals().unwrap_or_default();
                Ok(LayerMetrics {
                    max_vio: max_vio(&loads)?,
                    gini: gini(&loads)?,
                    m_hash: hash_vector(b.m()),
                })
            })
            .collect::<Result<_>>()?;
        Ok(EvalRow {
            step: self.step,
            task_loss: loss / n,
            accuracy: acc / n,
            layers,
        })
    }

    /// Trains until `steps` is reached.
    pub fn run(&mut self) -> Result<&RunRecord> {
        while !self.is_done() {
            self.step_once()?;
        }
        Ok(&self.record)
    }

    pub fn snapshot(&self) -> TrainerSnapshot {
        TrainerSnapshot {
            version: SNAPSHOT_VERSION,
            config_hash: self.config.hash(),
            step: self.step,
            params: self.model.params().to_vec(),
            optimizer: self.optimizer.clone(),
            balancers: self.balancers.clone(),
            load_windows: self.load_windows.clone(),
            loss_window: self.loss_window.clone(),
            record: self.record.clone(),
        }
    }

    pub fn resume(config: TrainConfig, snapshot: TrainerSnapshot) -> Result<Self> {
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(Error::Config(format!("unsupported snapshot version {}", snapshot.version)));
        }
        if snapshot.config_hash != config.hash() {
            return Err(Error::Config("snapshot was taken under a different config".into()));
        }
        let mut t = Self::new(config)?;
        if snapshot.balancers.len() != t.balancers.len() || snapshot.load_windows.len() != t.load_windows.len() {
            return Err(Error::Config("snapshot layer count does not match the config".into()));
        }
        t.model = Model::from_params(&t.config.model, t.model.task(), snapshot.params)?;
        t.model.set_checked(t.config.checked);
        t.optimizer = snapshot.optimizer;
        t.balancers = snapshot.balancers;
        t.load_windows = snapshot.load_windows;
        t.loss_window = snapshot.loss_window;
        t.step = snapshot.step;
        t.record = snapshot.record;
        Ok(t)
    }
}

/// Runs `config` from scratch.
pub fn train(config: &TrainConfig) -> Result<RunRecord> {
    let mut t = Trainer::new(config.clone())?;
    t.run()?;
    Ok(t.record)
}
