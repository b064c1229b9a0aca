//! Sparse top-k mixture-of-experts layer on the gradient tape.
//!
//! The router produces logits `x W_rᵀ`; routing probabilities are their
//! softmax. Each token picks the `k` largest logits (plus the optional
//! selection bias, ties to the lower index) and combines those experts with
//! weights given by a softmax over the selected unbiased logits, or by the
//! routing probability itself when `k = 1`. Experts are SwiGLU blocks whose
//! first matrix stacks the gate rows on top of the value rows.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Weights of one MoE layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLayerParams {
    router: Tensor,
    w1: Vec<Tensor>,
    w2: Vec<Tensor>,
    k: usize,
}

fn check_shape(t: &Tensor, shape: [usize; 2], what: &'static str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Shape {
            op: what,
            lhs: t.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

pub(crate) fn validate_dims(experts: usize, k: usize, d: usize, d_ffn: usize) -> Result<()> {
    if experts < 2 {
        return Err(Error::Config(format!("need at least 2 experts, got {experts}")));
    }
    if k == 0 || k > experts {
        return Err(Error::Config(format!("top-k must satisfy 1 <= k <= {experts}, got {k}")));
    }
    if d == 0 || d_ffn == 0 {
        return Err(Error::Config("model dimensions must be positive".into()));
    }
    Ok(())
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

impl MoeLayerParams {
    /// `router`: `E×d`; `w1[e]`: `2·d_ffn×d`; `w2[e]`: `d×d_ffn`.
    pub fn new(router: Tensor, w1: Vec<Tensor>, w2: Vec<Tensor>, k: usize) -> Result<Self> {
        if router.shape().len() != 2 || w1.is_empty() {
            return Err(Error::Config("router must be an E×d matrix with at least one expert".into()));
        }
        let (experts, d) = (router.rows(), router.cols());
        if w1.len() != experts || w2.len() != experts {
            return Err(Error::Config(format!(
                "router has {experts} rows but {} gate/value and {} output matrices were given",
                w1.len(),
                w2.len()
            )));
        }
        let rows = w1[0].shape().first().copied().unwrap_or(0);
        if rows % 2 != 0 {
            return Err(Error::Config(format!("expert input matrix needs an even row count, got {rows}")));
        }
        let d_ffn = rows / 2;
        validate_dims(experts, k, d, d_ffn)?;
        check_shape(&router, [experts, d], "router")?;
        for (a, b) in w1.iter().zip(&w2) {
            check_shape(a, [2 * d_ffn, d], "expert_w1")?;
            check_shape(b, [d, d_ffn], "expert_w2")?;
        }
        Ok(Self { router, w1, w2, k })
    }

    /// Gaussian init: router scale `1/√d`, expert matrices `1/√fan_in`.
    pub fn init(experts: usize, k: usize, d: usize, d_ffn: usize, rng: &mut impl Rng) -> Result<Self> {
        validate_dims(experts, k, d, d_ffn)?;
        let router = gaussian(rng, experts, d, 1.0 / (d as f64).sqrt());
        let w1 = (0..experts).map(|_| gaussian(rng, 2 * d_ffn, d, 1.0 / (d as f64).sqrt())).collect();
        let w2 = (0..experts).map(|_| gaussian(rng, d, d_ffn, 1.0 / (d_ffn as f64).sqrt())).collect();
        Ok(Self { router, w1, w2, k })
    }

    pub fn experts(&self) -> usize {
        self.router.rows()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.router.cols()
    }

    pub fn d_ffn(&self) -> usize {
        self.w2[0].cols()
    }

    pub fn router(&self) -> &Tensor {
        &self.router
    }

    pub fn w1(&self, e: usize) -> &Tensor {
        &self.w1[e]
    }

    pub fn w2(&self, e: usize) -> &Tensor {
        &self.w2[e]
    }

    /// Tensors in layout order: router, every `W_1`, every `W_2`.
    pub fn into_tensors(self) -> Vec<Tensor> {
        let mut out = vec![self.router];
        out.extend(self.w1);
        out.extend(self.w2);
        out
    }

    /// Records every weight as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<MoeLayer> {
        let router = tape.leaf(self.router.clone())?;
        let w1 = self.w1.iter().map(|w| tape.leaf(w.clone())).collect::<Result<_>>()?;
        let w2 = self.w2.iter().map(|w| tape.leaf(w.clone())).collect::<Result<_>>()?;
        MoeLayer::from_nodes(tape, router, w1, w2, self.k)
    }
}

/// Node handles of one layer's weights on a tape.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    router: NodeId,
    w1: Vec<NodeId>,
    w2: Vec<NodeId>,
    k: usize,
    d_ffn: usize,
}

/// Routing decisions and batch statistics for one batch of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingBatch {
    probs: Tensor,
    selections: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
    p_bar: Vec<f64>,
    counts: Vec<usize>,
    k: usize,
}

impl RoutingBatch {
    /// `T×E` softmax of the unbiased logits.
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    /// Per token, the selected experts from highest to lowest score.
    pub fn selections(&self) -> &[Vec<usize>] {
        &self.selections
    }

    /// Per token, combination weights aligned with [`RoutingBatch::selections`].
    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn p_bar(&self) -> &[f64] {
        &self.p_bar
    }

    pub fn tokens(&self) -> usize {
        self.selections.len()
    }

    pub fn experts(&self) -> usize {
        self.counts.len()
    }

    /// Tokens dispatched to each expert.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Selection frequencies normalised by `kT`; sums to one.
    pub fn f(&self) -> Vec<f64> {
        let denom = (self.k * self.tokens()) as f64;
        self.counts.iter().map(|&c| c as f64 / denom).collect()
    }

    /// Selection frequencies normalised by `T`; sums to `k`.
    pub fn f_per_token(&self) -> Vec<f64> {
        let denom = self.tokens() as f64;
        self.counts.iter().map(|&c| c as f64 / denom).collect()
    }
}

/// [`RoutingBatch`] plus the differentiable nodes it was read from.
#[derive(Clone, Debug)]
pub struct Routed {
    pub batch: RoutingBatch,
    /// `T×E` routing probabilities.
    pub probs: NodeId,
    /// Length-`E` batch mean of `probs`.
    pub p_bar: NodeId,
    /// `T×k` combination weights.
    pub weights: NodeId,
}

/// Indices of the `k` largest scores, larger first, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl MoeLayer {
    pub fn from_nodes(tape: &Tape, router: NodeId, w1: Vec<NodeId>, w2: Vec<NodeId>, k: usize) -> Result<Self> {
        let rs = tape.shape(router);
        if rs.len() != 2 || w1.len() != rs[0] || w2.len() != rs[0] {
            return Err(Error::Config("layer node lists do not match the router".into()));
        }
        let d_ffn = tape.shape(w1[0])[0] / 2;
        validate_dims(rs[0], k, rs[1], d_ffn)?;
        Ok(Self { router, w1, w2, k, d_ffn })
    }

    pub fn experts(&self) -> usize {
        self.w1.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn router(&self) -> NodeId {
        self.router
    }

    pub fn w1(&self, e: usize) -> NodeId {
        self.w1[e]
    }

    pub fn w2(&self, e: usize) -> NodeId {
        self.w2[e]
    }

    /// Routes the `T×d` tokens `x`; `bias` shifts selection scores only.
    pub fn route(&self, tape: &mut Tape, x: NodeId, bias: Option<&[f64]>) -> Result<Routed> {
        let experts = self.experts();
        if let Some(b) = bias {
            if b.len() != experts {
                return Err(Error::Length {
                    expected: experts,
                    got: b.len(),
                });
            }
        }
        let wt = tape.transpose(self.router)?;
        let logits = tape.matmul(x, wt)?;
        let probs = tape.softmax_rows(logits)?;
        let p_bar = tape.mean_rows(probs)?;
        let tokens = tape.value(logits).rows();

        let mut selections = Vec::with_capacity(tokens);
        let mut counts = vec![0usize; experts];
        let mut scores = vec![0.0; experts];
        for i in 0..tokens {
            let row = tape.value(logits).row(i);
            for (s, (&z, e)) in scores.iter_mut().zip(row.iter().zip(0..)) {
                *s = z + bias.map_or(0.0, |b| b[e]);
            }
            let sel = top_k(&scores, self.k);
            for &e in &sel {
                counts[e] += 1;
            }
            selections.push(sel);
        }
        let coords: Vec<(usize, usize)> = selections
            .iter()
            .enumerate()
            .flat_map(|(i, sel)| sel.iter().map(move |&e| (i, e)))
            .collect();
        let weights = if self.k == 1 {
            tape.gather(probs, &coords, &[tokens, 1])?
        } else {
            let picked = tape.gather(logits, &coords, &[tokens, self.k])?;
            tape.softmax_rows(picked)?
        };
        let wv = tape.value(weights);
        let weight_rows = (0..tokens).map(|i| wv.row(i).to_vec()).collect();
        let batch = RoutingBatch {
            probs: tape.value(probs).clone(),
            selections,
            weights: weight_rows,
            p_bar: tape.value(p_bar).data().to_vec(),
            counts,
            k: self.k,
        };
        Ok(Routed {
            batch,
            probs,
            p_bar,
            weights,
        })
    }

    /// SwiGLU expert `e` applied to every row of `u`:
    /// `W_2 (silu(a) ⊙ b)` with `[a; b] = W_1 u`.
    pub fn expert_forward(&self, tape: &mut Tape, e: usize, u: NodeId) -> Result<NodeId> {
        if e >= self.experts() {
            return Err(Error::InvalidParameter(format!("expert {e} out of range")));
        }
        let w1t = tape.transpose(self.w1[e])?;
        let h = tape.matmul(u, w1t)?;
        let a = tape.slice_cols(h, 0, self.d_ffn)?;
        let b = tape.slice_cols(h, self.d_ffn, 2 * self.d_ffn)?;
        let gate = tape.silu(a)?;
        let g = tape.mul(gate, b)?;
        let w2t = tape.transpose(self.w2[e])?;
        tape.matmul(g, w2t)
    }

    /// `y_i = Σ_{e ∈ sel(i)} w_{i,e} FFN_e(x_i)`. Experts run once each on
    /// the rows routed to them; contributions are summed in expert order.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, routed: &Routed) -> Result<NodeId> {
        let tokens = routed.batch.tokens();
        if tape.value(x).rows() != tokens {
            return Err(Error::Length {
                expected: tokens,
                got: tape.value(x).rows(),
            });
        }
        let mut acc: Option<NodeId> = None;
        for e in 0..self.experts() {
            let (rows, slots): (Vec<usize>, Vec<(usize, usize)>) = routed
                .batch
                .selections
                .iter()
                .enumerate()
                .filter_map(|(i, sel)| sel.iter().position(|&s| s == e).map(|j| (i, (i, j))))
                .unzip();
            if rows.is_empty() {
                continue;
            }
            let xs = tape.index_select(x, &rows)?;
            let out = self.expert_forward(tape, e, xs)?;
            let w = tape.gather(routed.weights, &slots, &[rows.len(), 1])?;
            let scaled = tape.mul(out, w)?;
            let placed = tape.scatter_rows(scaled, &rows, tokens)?;
            acc = Some(match acc {
                None => placed,
                Some(a) => tape.add(a, placed)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidParameter("no token was routed".into()))
    }
}

/// Routing decisions for `x` without keeping a tape.
pub fn route(params: &MoeLayerParams, x: &Tensor, bias: Option<&[f64]>) -> Result<RoutingBatch> {
    let mut tape = Tape::new();
    let layer = params.register(&mut tape)?;
    let xn = tape.constant(x.clone())?;
    Ok(layer.route(&mut tape, xn, bias)?.batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, max_relative_error, sigmoid};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_with_router(router: Vec<f64>, experts: usize, d: usize, k: usize) -> MoeLayerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = MoeLayerParams::init(experts, k, d, 3, &mut rng).unwrap();
        MoeLayerParams::new(Tensor::matrix(experts, d, router).unwrap(), base.w1, base.w2, k).unwrap()
    }

    fn random_x(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        gaussian(rng, t, d, 1.0)
    }

    #[test]
    fn top_two_weights() {
        // x = 1, router column gives logits (2, 1, 0)
        let p = layer_with_router(vec![2.0, 1.0, 0.0], 3, 1, 2);
        let r = route(&p, &Tensor::matrix(1, 1, vec![1.0]).unwrap(), None).unwrap();
        assert_eq!(r.selections(), &[vec![0, 1]]);
        let z = 2f64.exp() + 1f64.exp();
        assert!((r.weights()[0][0] - 2f64.exp() / z).abs() < 1e-12);
        assert!((r.weights()[0][0] - 0.731059).abs() < 1e-6 && (r.weights()[0][1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let p = layer_with_router(vec![0.0; 4], 4, 1, 2);
        let r = route(&p, &Tensor::matrix(1, 1, vec![1.0]).unwrap(), None).unwrap();
        assert_eq!(r.selections(), &[vec![0, 1]]);
        assert_eq!(r.weights(), &[vec![0.5, 0.5]]);
    }

    #[test]
    fn single_expert_frequencies_and_weights() {
        let p = layer_with_router(vec![1.0, -1.0], 2, 1, 1);
        let x = Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap();
        let r = route(&p, &x, None).unwrap();
        assert_eq!(r.selections(), &[vec![0], vec![1]]);
        assert_eq!(r.f(), vec![0.5, 0.5]);
        // k = 1 weight is the routing probability itself
        assert_eq!(r.weights()[0][0], r.probs().at(0, 0));
        assert!((r.weights()[0][0] - sigmoid(2.0)).abs() < 1e-15);
    }

    #[test]
    fn k_above_experts_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(MoeLayerParams::init(4, 5, 2, 2, &mut rng), Err(Error::Config(_))));
        assert!(matches!(MoeLayerParams::init(4, 0, 2, 2, &mut rng), Err(Error::Config(_))));
    }

    fn unit_expert() -> (Tape, MoeLayer) {
        let p = MoeLayerParams::new(
            Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap(),
            vec![Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(); 2],
            vec![Tensor::matrix(1, 1, vec![1.0]).unwrap(); 2],
            1,
        )
        .unwrap();
        let mut t = Tape::new();
        let l = p.register(&mut t).unwrap();
        (t, l)
    }

    #[test]
    fn expert_forward_examples() {
        let (mut t, l) = unit_expert();
        let u = t.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        let y = l.expert_forward(&mut t, 0, u).unwrap();
        let expected = 2.0 * 2.0 * sigmoid(2.0);
        assert!((t.value(y).item() - expected).abs() < 1e-15);
        assert!((expected - 3.523188).abs() < 1e-6);
        assert!(l.expert_forward(&mut t, 2, u).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = MoeLayerParams::init(2, 1, 4, 3, &mut rng).unwrap();
        let zero = MoeLayerParams::new(base.router.clone(), vec![Tensor::zeros(&[6, 4]); 2], base.w2.clone(), 1).unwrap();
        let mut t = Tape::new();
        let l = zero.register(&mut t).unwrap();
        let u = t.constant(random_x(&mut rng, 3, 4)).unwrap();
        let y = l.expert_forward(&mut t, 1, u).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expert_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MoeLayerParams::init(2, 1, 3, 4, &mut rng).unwrap();
        let u0 = random_x(&mut rng, 2, 3);
        let params = vec![p.w1[1].clone(), p.w2[1].clone(), u0];
        let build = |t: &mut Tape, ps: &[Tensor]| -> (Vec<NodeId>, NodeId) {
            let r = t.leaf(p.router.clone()).unwrap();
            let w1 = t.leaf(ps[0].clone()).unwrap();
            let w2 = t.leaf(ps[1].clone()).unwrap();
            let u = t.leaf(ps[2].clone()).unwrap();
            let l = MoeLayer::from_nodes(t, r, vec![w1, w1], vec![w2, w2], 1).unwrap();
            let y = l.expert_forward(t, 1, u).unwrap();
            let y2 = t.pow(y, 2.0).unwrap();
            (vec![w1, w2, u], t.sum(y2).unwrap())
        };
        let mut t = Tape::new();
        let (ids, root) = build(&mut t, &params);
        let g = t.backward(root).unwrap();
        let analytic: Vec<Tensor> = ids.iter().map(|&i| g.get(i)).collect();
        let numeric = central_difference(
            |ps| {
                let mut t = Tape::new();
                let (_, root) = build(&mut t, ps);
                t.value(root).item()
            },
            &params,
            1e-5,
        );
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
    }

    #[test]
    fn degenerate_single_expert_combination() {
        // both experts identical and k = 2: any convex weights give the shared output
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = MoeLayerParams::init(2, 2, 4, 3, &mut rng).unwrap();
        let p = MoeLayerParams::new(base.router.clone(), vec![base.w1[0].clone(); 2], vec![base.w2[0].clone(); 2], 2).unwrap();
        let mut t = Tape::new();
        let l = p.register(&mut t).unwrap();
        let x = t.constant(random_x(&mut rng, 5, 4)).unwrap();
        let routed = l.route(&mut t, x, None).unwrap();
        let y = l.forward(&mut t, x, &routed).unwrap();
        let single = l.expert_forward(&mut t, 0, x).unwrap();
        for (a, b) in t.value(y).data().iter().zip(t.value(single).data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // k = 1: output is the selected expert scaled by its routing probability
        let p = MoeLayerParams::new(base.router.clone(), base.w1.clone(), base.w2.clone(), 1).unwrap();
        let mut t = Tape::new();
        let l = p.register(&mut t).unwrap();
        let x = t.constant(random_x(&mut rng, 4, 4)).unwrap();
        let routed = l.route(&mut t, x, None).unwrap();
        let y = l.forward(&mut t, x, &routed).unwrap();
        let y = t.value(y).clone();
        for i in 0..4 {
            let e = routed.batch.selections()[i][0];
            let row = Tensor::matrix(1, 4, t.value(x).row(i).to_vec()).unwrap();
            let xi = t.constant(row).unwrap();
            let out = l.expert_forward(&mut t, e, xi).unwrap();
            let pe = routed.batch.probs().at(i, e);
            for (a, b) in y.row(i).iter().zip(t.value(out).data()) {
                assert!((a - pe * b).abs() < 1e-15);
            }
        }
    }

    /// Masked dense evaluation `Σ_e R_{i,e} FFN_e(x_i)`, experts in ascending order.
    fn dense_oracle(t: &mut Tape, l: &MoeLayer, x: NodeId, batch: &RoutingBatch) -> Vec<f64> {
        let (tokens, d) = (t.value(x).rows(), t.value(x).cols());
        let mut y = vec![0.0; tokens * d];
        for e in 0..l.experts() {
            let out = l.expert_forward(t, e, x).unwrap();
            let out = t.value(out);
            for i in 0..tokens {
                let r = batch.selections()[i]
                    .iter()
                    .position(|&s| s == e)
                    .map_or(0.0, |j| batch.weights()[i][j]);
                for c in 0..d {
                    y[i * d + c] += r * out.at(i, c);
                }
            }
        }
        y
    }

    #[test]
    fn unselected_experts_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MoeLayerParams::init(8, 1, 4, 3, &mut rng).unwrap();
        let mut t = Tape::new();
        let l = p.register(&mut t).unwrap();
        let x = t.constant(random_x(&mut rng, 2, 4)).unwrap();
        let routed = l.route(&mut t, x, None).unwrap();
        let y = l.forward(&mut t, x, &routed).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        for e in 0..8 {
            let used = routed.batch.counts()[e] > 0;
            assert_eq!(g.has(l.w1(e)), used, "expert {e}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn sparse_equals_masked_dense(seed in 0u64..10_000, k in 1usize..=4, tokens in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = MoeLayerParams::init(6, k, 5, 4, &mut rng).unwrap();
            let mut t = Tape::new();
            let l = p.register(&mut t).unwrap();
            let x = t.constant(random_x(&mut rng, tokens, 5)).unwrap();
            let routed = l.route(&mut t, x, None).unwrap();
            let y = l.forward(&mut t, x, &routed).unwrap();
            let sparse = t.value(y).data().to_vec();
            let dense = dense_oracle(&mut t, &l, x, &routed.batch);
            prop_assert_eq!(sparse, dense);
        }

        #[test]
        fn routing_invariants(seed in 0u64..10_000, k in 1usize..=6, tokens in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = MoeLayerParams::init(6, k, 3, 2, &mut rng).unwrap();
            let r = route(&p, &random_x(&mut rng, tokens, 3), None).unwrap();
            for i in 0..tokens {
                let row_sum: f64 = r.probs().row(i).iter().sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-9);
                if k >= 2 {
                    prop_assert!(r.weights()[i].iter().all(|&w| w >= 0.0));
                    prop_assert!((r.weights()[i].iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                let mut sel = r.selections()[i].clone();
                sel.sort_unstable();
                sel.dedup();
                prop_assert_eq!(sel.len(), k);
            }
            prop_assert!((r.f().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((r.f_per_token().iter().sum::<f64>() - k as f64).abs() < 1e-9);
        }

        #[test]
        fn permuting_experts_is_equivariant(seed in 0u64..10_000, shift in 1usize..6) {
            let e = 6;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = MoeLayerParams::init(e, 2, 4, 3, &mut rng).unwrap();
            let x0 = random_x(&mut rng, 7, 4);
            let perm: Vec<usize> = (0..e).map(|i| (i + shift) % e).collect();
            let rows: Vec<f64> = perm.iter().flat_map(|&j| p.router.row(j).to_vec()).collect();
            let q = MoeLayerParams::new(
                Tensor::matrix(e, 4, rows).unwrap(),
                perm.iter().map(|&j| p.w1[j].clone()).collect(),
                perm.iter().map(|&j| p.w2[j].clone()).collect(),
                2,
            ).unwrap();
            let run = |params: &MoeLayerParams| {
                let mut t = Tape::new();
                let l = params.register(&mut t).unwrap();
                let x = t.constant(x0.clone()).unwrap();
                let routed = l.route(&mut t, x, None).unwrap();
                let y = l.forward(&mut t, x, &routed).unwrap();
                (routed.batch, t.value(y).clone())
            };
            let (ra, ya) = run(&p);
            let (rb, yb) = run(&q);
            for (sa, sb) in ra.selections().iter().zip(rb.selections()) {
                let mapped: Vec<usize> = sb.iter().map(|&j| perm[j]).collect();
                prop_assert_eq!(sa, &mapped);
            }
            for (a, b) in ya.data().iter().zip(yb.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn bias_steers_selection_not_weight_inputs(seed in 0u64..10_000, boost in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = MoeLayerParams::init(6, 2, 3, 2, &mut rng).unwrap();
            let x = random_x(&mut rng, 9, 3);
            let mut bias = vec![0.0; 6];
            bias[boost] = 100.0;
            let plain = route(&p, &x, None).unwrap();
            let steered = route(&p, &x, Some(&bias)).unwrap();
            prop_assert_eq!(plain.probs(), steered.probs());
            prop_assert_eq!(plain.p_bar(), steered.p_bar());
            let logits: Vec<Vec<f64>> = (0..9)
                .map(|i| (0..6).map(|e| (0..3).map(|c| x.at(i, c) * p.router.at(e, c)).sum()).collect())
                .collect();
            for i in 0..9 {
                let sel = &steered.selections()[i];
                prop_assert!(sel.contains(&boost));
                // weights are the softmax of the selected unbiased logits
                let z: Vec<f64> = sel.iter().map(|&e| logits[i][e]).collect();
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
                for (w, v) in steered.weights()[i].iter().zip(&z) {
                    prop_assert!((w - (v - mx).exp() / s).abs() < 1e-12);
                }
            }
        }
    }
}
