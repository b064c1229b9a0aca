use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::balancer::{stmoe_aux_loss, total_loss, BalancerState, Mechanism, Statistic};
use crate::corpus::{Batch, Labels};
use crate::error::{Error, Result};
use crate::moe::{MoeLayer, MoeLayerParams, Routed};

/// Supervised objective of the output head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Per-token cross-entropy over `classes`.
    Classification { classes: usize },
    /// Per-token squared error on `outputs` targets.
    Regression { outputs: usize },
}

impl Task {
    fn outputs(self) -> usize {
        match self {
            Task::Classification { classes } => classes,
            Task::Regression { outputs } => outputs,
        }
    }
}

/// How φ-balancing obtains its prices inside [`Model::forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriceMode {
    /// Training path: advance each layer's EMA with this batch, then price.
    Tracked,
    /// Price from the balancers' current `m` and leave every state untouched.
    Frozen,
}

/// Stack of residual MoE layers followed by a per-token linear head.
///
/// Parameters live in one flat list: for each layer the router, the `E`
/// SwiGLU input matrices and the `E` output matrices, then the head weight
/// and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    dims: ModelConfig,
    task: Task,
    params: Vec<Tensor>,
    checked: bool,
}

/// Everything recorded by one forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    /// Leaf node of every parameter, in layout order.
    pub params: Vec<NodeId>,
    pub routed: Vec<Routed>,
    pub logits: NodeId,
    pub task: NodeId,
    /// Per-layer auxiliary losses; empty under loss-free balancing.
    pub aux: Vec<NodeId>,
    pub total: NodeId,
    /// Fraction of correct classes, or of matching target signs.
    pub accuracy: f64,
}

impl ForwardPass {
    pub fn task_loss(&self) -> f64 {
        self.tape.value(self.task).item()
    }

    pub fn total_loss(&self) -> f64 {
        self.tape.value(self.total).item()
    }

    /// Gradient of `root` for every parameter, in layout order.
    pub fn gradients(&self, root: NodeId) -> Result<Vec<Tensor>> {
        let g = self.tape.backward(root)?;
        Ok(self.params.iter().map(|&p| g.get(p)).collect())
    }
}

impl Model {
    pub fn init(dims: &ModelConfig, task: Task, rng: &mut impl Rng) -> Result<Self> {
        let mut params = Vec::new();
        for _ in 0..dims.layers {
            params.extend(MoeLayerParams::init(dims.experts, dims.top_k, dims.d, dims.d_ffn, rng)?.into_tensors());
        }
        let scale = 1.0 / (dims.d as f64).sqrt();
        let outputs = task.outputs();
        let w = (0..outputs * dims.d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        params.push(Tensor::matrix(outputs, dims.d, w)?);
        params.push(Tensor::vector(vec![0.0; outputs]));
        Ok(Self {
            dims: dims.clone(),
            task,
            params,
            checked: true,
        })
    }

    pub fn from_params(dims: &ModelConfig, task: Task, params: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::shapes(dims, task);
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(a, b)| a.shape() != b.as_slice()) {
            return Err(Error::Config("parameter list does not match the model layout".into()));
        }
        Ok(Self {
            dims: dims.clone(),
            task,
            params,
            checked: true,
        })
    }

    /// Toggles the per-op NaN/Inf guard of forward tapes (on by default).
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    /// Parameter shapes in layout order.
    pub fn shapes(dims: &ModelConfig, task: Task) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for _ in 0..dims.layers {
            out.push(vec![dims.experts, dims.d]);
            out.extend((0..dims.experts).map(|_| vec![2 * dims.d_ffn, dims.d]));
            out.extend((0..dims.experts).map(|_| vec![dims.d, dims.d_ffn]));
        }
        out.push(vec![task.outputs(), dims.d]);
        out.push(vec![task.outputs()]);
        out
    }

    pub fn dims(&self) -> &ModelConfig {
        &self.dims
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn layer_width(&self) -> usize {
        1 + 2 * self.dims.experts
    }

    /// Parameter indices of layer `l`'s router.
    pub fn router_index(&self, l: usize) -> usize {
        l * self.layer_width()
    }

    /// Routes, combines, scores and prices one batch.
    ///
    /// `balancers` holds one state per layer; their mechanism decides the
    /// auxiliary term and, for loss-free balancing, supplies the selection
    /// bias. In [`PriceMode::Tracked`] each EMA advances by the batch's
    /// routing statistic.
    pub fn forward(&self, batch: &Batch, balancers: &mut [BalancerState], alpha: f64, mode: PriceMode) -> Result<ForwardPass> {
        let dims = &self.dims;
        if balancers.len() != dims.layers {
            return Err(Error::Length {
                expected: dims.layers,
                got: balancers.len(),
            });
        }
        let mut tape = if self.checked { Tape::new() } else { Tape::unchecked() };
        let params: Vec<NodeId> = self.params.iter().map(|p| tape.leaf(p.clone())).collect::<Result<_>>()?;
        let mut h = tape.constant(batch.x.clone())?;
        let mut routed = Vec::with_capacity(dims.layers);
        let e = dims.experts;
        for (l, state) in balancers.iter().enumerate() {
            let base = l * self.layer_width();
            let layer = MoeLayer::from_nodes(
                &tape,
                params[base],
                params[base + 1..base + 1 + e].to_vec(),
                params[base + 1 + e..base + 1 + 2 * e].to_vec(),
                dims.top_k,
            )?;
            let r = layer.route(&mut tape, h, state.bias())?;
            let y = layer.forward(&mut tape, h, &r)?;
            h = tape.add(h, y)?;
            routed.push(r);
        }
        let head = params[params.len() - 2];
        let bias = params[params.len() - 1];
        let wt = tape.transpose(head)?;
        let z = tape.matmul(h, wt)?;
        let logits = tape.add(z, bias)?;

        let (task, accuracy) = self.task_loss(&mut tape, logits, &batch.labels)?;

        let mut aux = Vec::with_capacity(dims.layers);
        for (state, r) in balancers.iter_mut().zip(&routed) {
            let stat = match state.statistic() {
                Statistic::Probability => r.batch.p_bar().to_vec(),
                Statistic::Frequency => r.batch.f_per_token(),
            };
            match (state.mechanism().clone(), mode) {
                (Mechanism::PhiBalancing(_), PriceMode::Tracked) => {
                    aux.push(state.tracked_phi_aux_loss(&mut tape, r.p_bar, &r.batch.f_per_token())?);
                }
                (Mechanism::PhiBalancing(_), PriceMode::Frozen) => aux.push(state.phi_aux_loss(&mut tape, r.p_bar)?),
                (Mechanism::StMoe, _) => {
                    if mode == PriceMode::Tracked {
                        state.ema_update(&stat)?;
                    }
                    aux.push(stmoe_aux_loss(&mut tape, &r.batch.f(), r.p_bar)?);
                }
                (Mechanism::LossFree { .. }, _) => {
                    if mode == PriceMode::Tracked {
                        state.ema_update(&stat)?;
                    }
                }
            }
        }
        let total = total_loss(&mut tape, task, &aux, alpha, dims.experts)?;
        Ok(ForwardPass {
            tape,
            params,
            routed,
            logits,
            task,
            aux,
            total,
            accuracy,
        })
    }

    fn task_loss(&self, tape: &mut Tape, logits: NodeId, labels: &Labels) -> Result<(NodeId, f64)> {
        let tokens = tape.value(logits).rows();
        match (self.task, labels) {
            (Task::Classification { classes }, Labels::Classes(y)) => {
                if y.len() != tokens || y.iter().any(|&c| c >= classes) {
                    return Err(Error::InvalidParameter("class labels do not match the head".into()));
                }
                let lv = tape.value(logits);
                let correct = (0..tokens)
                    .filter(|&i| {
                        let row = lv.row(i);
                        let arg = (0..classes).fold(0, |best, c| if row[c] > row[best] { c } else { best });
                        arg == y[i]
                    })
                    .count();
                let ls = tape.log_softmax_rows(logits)?;
                let coords: Vec<(usize, usize)> = y.iter().enumerate().map(|(i, &c)| (i, c)).collect();
                let picked = tape.gather(ls, &coords, &[tokens])?;
                let mean = tape.mean(picked)?;
                Ok((tape.scalar_mul(mean, -1.0)?, correct as f64 / tokens as f64))
            }
            (Task::Regression { outputs }, Labels::Targets(t)) => {
                if t.shape() != [tokens, outputs] {
                    return Err(Error::InvalidParameter("regression targets do not match the head".into()));
                }
                let lv = tape.value(logits);
                let agree = lv
                    .data()
                    .iter()
                    .zip(t.data())
                    .filter(|(a, b)| (**a >= 0.0) == (**b >= 0.0))
                    .count();
                let acc = agree as f64 / t.len() as f64;
                let target = tape.constant(t.clone())?;
                let diff = tape.sub(logits, target)?;
                let sq = tape.pow(diff, 2.0)?;
                Ok((tape.mean(sq)?, acc))
            }
            _ => Err(Error::InvalidParameter("label kind does not match the task".into())),
        }
    }
}
