//! Deterministic multi-domain token generator.
//!
//! Each domain is a Gaussian cluster in `R^d`. A batch draws a domain per
//! token from the (possibly drifting) mixture, then a point around that
//! domain's center. `(seed, step)` fixes the batch completely.

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::prob::ProbVector;

/// Supervision attached to each token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LabelRule {
    /// Class label equals the domain index.
    #[default]
    DomainId,
    /// Regression target `W_t x` with a seeded Gaussian `W_t`.
    LinearTeacher { outputs: usize },
}

/// Per-step domain mixture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DriftSchedule {
    /// Always the base mixture.
    #[default]
    Constant,
    /// Mixture `steps mod n` of the list.
    Cycle { mixtures: Vec<Vec<f64>> },
    /// Linear interpolation from `from` to `to` over `over_steps`, then `to`.
    Linear { from: Vec<f64>, to: Vec<f64>, over_steps: u64 },
}

fn default_scale() -> f64 {
    1.2
}

/// Generator description; serialises inside experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub domains: usize,
    pub dim: usize,
    /// Domain weights; uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<Vec<f64>>,
    /// Explicit `D×d` centers; when omitted, random Gaussian directions scaled
    /// to norm `√d`, drawn from the seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_scale")]
    pub cluster_scale: f64,
    #[serde(default)]
    pub label: LabelRule,
    /// Falls back to the run seed when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub drift: DriftSchedule,
}

/// Labels of one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// `T×outputs` regression targets.
    Targets(Tensor),
}

/// One sampled batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `T×d` token matrix.
    pub x: Tensor,
    pub labels: Labels,
    pub domains: Vec<usize>,
}

fn check_simplex(w: &[f64], domains: usize, what: &str) -> Result<()> {
    if w.len() != domains {
        return Err(Error::Config(format!("{what} has {} weights for {domains} domains", w.len())));
    }
    ProbVector::simplex(w.to_vec()).map_err(|e| Error::Config(format!("{what}: {e}")))?;
    Ok(())
}

impl CorpusSpec {
    pub fn new(domains: usize, dim: usize) -> Self {
        Self {
            domains,
            dim,
            mixture: None,
            centers: None,
            cluster_scale: default_scale(),
            label: LabelRule::DomainId,
            seed: None,
            drift: DriftSchedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains < 2 {
            return Err(Error::Config(format!("corpus needs at least 2 domains, got {}", self.domains)));
        }
        if self.dim == 0 {
            return Err(Error::Config("corpus dimension must be positive".into()));
        }
        if !(self.cluster_scale >= 0.0 && self.cluster_scale.is_finite()) {
            return Err(Error::Config(format!("cluster_scale must be nonnegative, got {}", self.cluster_scale)));
        }
        if let Some(m) = &self.mixture {
            check_simplex(m, self.domains, "mixture")?;
        }
        if let Some(c) = &self.centers {
            if c.len() != self.domains || c.iter().any(|r| r.len() != self.dim || r.iter().any(|v| !v.is_finite())) {
                return Err(Error::Config(format!("centers must be a finite {}x{} array", self.domains, self.dim)));
            }
        }
        if let LabelRule::LinearTeacher { outputs: 0 } = self.label {
            return Err(Error::Config("linear teacher needs at least one output".into()));
        }
        match &self.drift {
            DriftSchedule::Constant => {}
            DriftSchedule::Cycle { mixtures } => {
                if mixtures.is_empty() {
                    return Err(Error::Config("cycle schedule needs at least one mixture".into()));
                }
                for m in mixtures {
                    check_simplex(m, self.domains, "cycle mixture")?;
                }
            }
            DriftSchedule::Linear { from, to, over_steps } => {
                check_simplex(from, self.domains, "drift start")?;
                check_simplex(to, self.domains, "drift end")?;
                if *over_steps == 0 {
                    return Err(Error::Config("linear drift needs over_steps > 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn base_mixture(&self) -> Vec<f64> {
        self.mixture
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.domains as f64; self.domains])
    }

    /// Domain weights in force at `step`.
    pub fn mixture_at(&self, step: u64) -> Vec<f64> {
        match &self.drift {
            DriftSchedule::Constant => self.base_mixture(),
            DriftSchedule::Cycle { mixtures } => mixtures[(step % mixtures.len() as u64) as usize].clone(),
            DriftSchedule::Linear { from, to, over_steps } => {
                let s = (step.min(*over_steps)) as f64 / *over_steps as f64;
                from.iter().zip(to).map(|(a, b)| (1.0 - s) * a + s * b).collect()
            }
        }
    }

    /// Number of targets per token: `D` classes or the teacher's outputs.
    pub fn outputs(&self) -> usize {
        match self.label {
            LabelRule::DomainId => self.domains,
            LabelRule::LinearTeacher { outputs } => outputs,
        }
    }

    /// Draws centers and teacher weights.
    pub fn build(&self) -> Result<Corpus> {
        self.validate()?;
        let seed = self.seed.unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let centers = match &self.centers {
            Some(c) => c.iter().flatten().copied().collect(),
            None => {
                let radius = (self.dim as f64).sqrt();
                let mut c = Vec::with_capacity(self.domains * self.dim);
                for _ in 0..self.domains {
                    let dir: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                    c.extend(dir.iter().map(|v| radius * v / norm));
                }
                c
            }
        };
        let teacher = match self.label {
            LabelRule::DomainId => None,
            LabelRule::LinearTeacher { outputs } => {
                let scale = 1.0 / (self.dim as f64).sqrt();
                let w = (0..outputs * self.dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
                Some(Tensor::matrix(outputs, self.dim, w)?)
            }
        };
        Ok(Corpus {
            spec: self.clone(),
            seed,
            centers: Tensor::matrix(self.domains, self.dim, centers)?,
            teacher,
        })
    }

    pub fn sample_batch(&self, tokens: usize, step: u64) -> Result<Batch> {
        self.build()?.sample_batch(tokens, step)
    }
}

/// Returns `spec` with its mixture driven by `schedule`.
pub fn drift_mixture(spec: &CorpusSpec, schedule: DriftSchedule) -> Result<CorpusSpec> {
    let out = CorpusSpec {
        drift: schedule,
        ..spec.clone()
    };
    out.validate()?;
    Ok(out)
}

/// Materialised generator.
#[derive(Clone, Debug)]
pub struct Corpus {
    spec: CorpusSpec,
    seed: u64,
    centers: Tensor,
    teacher: Option<Tensor>,
}

impl Corpus {
    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn teacher(&self) -> Option<&Tensor> {
        self.teacher.as_ref()
    }

    pub fn sample_batch(&self, tokens: usize, step: u64) -> Result<Batch> {
        if tokens == 0 {
            return Err(Error::InvalidParameter("batch needs at least one token".into()));
        }
        let d = self.spec.dim;
        let mixture = self.spec.mixture_at(step);
        let pick = WeightedIndex::new(&mixture).map_err(|e| Error::Config(format!("mixture at step {step}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let mut x = Vec::with_capacity(tokens * d);
        let mut domains = Vec::with_capacity(tokens);
        for _ in 0..tokens {
            let dom = pick.sample(&mut rng);
            domains.push(dom);
            for &c in self.centers.row(dom) {
                let noise: f64 = rng.sample(StandardNormal);
                x.push(c + self.spec.cluster_scale * noise);
            }
        }
        let x = Tensor::matrix(tokens, d, x)?;
        let labels = match &self.teacher {
            None => Labels::Classes(domains.clone()),
            Some(w) => {
                let mut y = Vec::with_capacity(tokens * w.rows());
                for i in 0..tokens {
                    for o in 0..w.rows() {
                        y.push(x.row(i).iter().zip(w.row(o)).map(|(a, b)| a * b).sum());
                    }
                }
                Labels::Targets(Tensor::matrix(tokens, w.rows(), y)?)
            }
        };
        Ok(Batch { x, labels, domains })
    }
}
