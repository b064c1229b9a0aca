//! Online dual tracker and the competing balancing mechanisms.
//!
//! Per layer, φ-balancing keeps an EMA `m` of batch routing statistics and
//! prices each expert at `q = ∇φ(m)`; the auxiliary loss is `Σ p_e · q_e` with
//! `q` behind a stop-gradient. The ST-MoE baseline replaces `q` with realized
//! dispatch frequencies; the loss-free baseline adds a selection-only bias to
//! the router logits instead of a loss term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::potentials::PotentialSpec;
use crate::scalar::Scalar;
use crate::Potential;

/// Default step `u` of the loss-free bias update.
pub const DEFAULT_BIAS_STEP: f64 = 1e-3;

/// Exponential moving average `m ← (1 − η) m + η p`, starting from zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaTracker<T> {
    m: Vec<T>,
    eta: T,
    steps: u64,
}

impl<T: Scalar> EmaTracker<T> {
    pub fn new(len: usize, eta: T) -> Result<Self> {
        if !(eta > T::zero() && eta <= T::one()) {
            return Err(Error::InvalidParameter(format!("eta must lie in (0, 1], got {eta}")));
        }
        Ok(Self {
            m: vec![T::zero(); len],
            eta,
            steps: 0,
        })
    }

    /// Tracker resuming from an arbitrary `m` (its step count starts at 0).
    pub fn from_state(m: Vec<T>, eta: T) -> Result<Self> {
        let mut t = Self::new(m.len(), eta)?;
        t.m = m;
        Ok(t)
    }

    pub fn update(&mut self, p: &[T]) -> Result<()> {
        if p.len() != self.m.len() {
            return Err(Error::Length {
                expected: self.m.len(),
                got: p.len(),
            });
        }
        let keep = T::one() - self.eta;
        for (m, &x) in self.m.iter_mut().zip(p) {
            *m = keep * *m + self.eta * x;
        }
        self.steps += 1;
        Ok(())
    }

    pub fn m(&self) -> &[T] {
        &self.m
    }

    pub fn eta(&self) -> T {
        self.eta
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `1 − (1 − η)^t`: total mass of `m` after `t` simplex updates.
    pub fn expected_mass(&self) -> T {
        T::one() - (T::one() - self.eta).powi(self.steps as i32)
    }

    pub(crate) fn overwrite(&mut self, m: Vec<T>) {
        self.m = m;
        self.steps += 1;
    }
}

/// Which batch statistic feeds the EMA.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// Batch-mean pre-top-k routing probabilities.
    Probability,
    /// Selection frequencies normalised by the token count (they sum to `k`).
    Frequency,
}

/// Balancing mechanism of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Mechanism {
    PhiBalancing(Potential),
    StMoe,
    LossFree { bias_step: f64 },
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::PhiBalancing(_) => "phi",
            Mechanism::StMoe => "st_moe",
            Mechanism::LossFree { .. } => "loss_free",
        }
    }

    pub fn potential(&self) -> Option<&Potential> {
        match self {
            Mechanism::PhiBalancing(p) => Some(p),
            _ => None,
        }
    }
}

/// Per-layer balancing state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BalancerSnapshot", into = "BalancerSnapshot")]
pub struct BalancerState {
    ema: EmaTracker<f64>,
    alpha: f64,
    statistic: Statistic,
    mechanism: Mechanism,
    bias: Option<Vec<f64>>,
}

impl BalancerState {
    /// `alpha = 0` is accepted so that unbalanced baselines share the code path.
    pub fn new(experts: usize, eta: f64, alpha: f64, statistic: Statistic, mechanism: Mechanism) -> Result<Self> {
        if experts < 2 {
            return Err(Error::InvalidParameter("at least two experts required".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be nonnegative, got {alpha}")));
        }
        let bias = match mechanism {
            Mechanism::LossFree { bias_step } => {
                if !(bias_step > 0.0 && bias_step.is_finite()) {
                    return Err(Error::InvalidParameter(format!("bias step must be positive, got {bias_step}")));
                }
                Some(vec![0.0; experts])
            }
            _ => None,
        };
        Ok(Self {
            ema: EmaTracker::new(experts, eta)?,
            alpha,
            statistic,
            mechanism,
            bias,
        })
    }

    pub fn experts(&self) -> usize {
        self.ema.m().len()
    }

    pub fn m(&self) -> &[f64] {
        self.ema.m()
    }

    pub fn ema(&self) -> &EmaTracker<f64> {
        &self.ema
    }

    pub fn eta(&self) -> f64 {
        self.ema.eta()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn statistic(&self) -> Statistic {
        self.statistic
    }

    pub fn mechanism(&self) -> &Mechanism {
        &self.mechanism
    }

    /// Loss-free selection bias, if that mechanism is active.
    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn ema_update(&mut self, stat: &[f64]) -> Result<()> {
        self.ema.update(stat)
    }

    fn potential(&self) -> Result<&Potential> {
        self.mechanism
            .potential()
            .ok_or_else(|| Error::InvalidParameter(format!("{} has no potential", self.mechanism.name())))
    }

    /// `Σ_e p_e · StopGrad(∇φ(m)_e)` using the current `m`; call after
    /// [`BalancerState::ema_update`].
    pub fn phi_aux_loss(&self, tape: &mut Tape, p: NodeId) -> Result<NodeId> {
        let potential = *self.potential()?;
        let m = tape.constant(Tensor::vector(self.m().to_vec()))?;
        price_loss(tape, &potential, m, p)
    }

    /// One φ-balancing step on the tape: the EMA is formed as a tape node
    /// `(1 − η) m_t + η s` (with `s = p` in probability mode, the constant
    /// frequencies otherwise), the state takes its value, and the price
    /// `∇φ(m_{t+1})` is read through a stop-gradient.
    pub fn tracked_phi_aux_loss(&mut self, tape: &mut Tape, p: NodeId, frequencies: &[f64]) -> Result<NodeId> {
        let potential = *self.potential()?;
        let eta = self.eta();
        let stat = match self.statistic {
            Statistic::Probability => p,
            Statistic::Frequency => tape.constant(Tensor::vector(frequencies.to_vec()))?,
        };
        if tape.value(stat).len() != self.experts() {
            return Err(Error::Length {
                expected: self.experts(),
                got: tape.value(stat).len(),
            });
        }
        let prev = tape.constant(Tensor::vector(self.m().to_vec()))?;
        let kept = tape.scalar_mul(prev, 1.0 - eta)?;
        let fresh = tape.scalar_mul(stat, eta)?;
        let m_next = tape.add(kept, fresh)?;
        self.ema.overwrite(tape.value(m_next).data().to_vec());
        price_loss(tape, &potential, m_next, p)
    }

    /// Loss-free bias step `b_e += u · sign(1/E − f_e)`, with `sign(0) = 0`.
    pub fn loss_free_step(&mut self, f: &[f64]) -> Result<()> {
        let Mechanism::LossFree { bias_step } = self.mechanism else {
            return Err(Error::InvalidParameter("loss_free_step needs the loss-free mechanism".into()));
        };
        let experts = self.experts();
        if f.len() != experts {
            return Err(Error::Length {
                expected: experts,
                got: f.len(),
            });
        }
        let target = 1.0 / experts as f64;
        let bias = self.bias.get_or_insert_with(|| vec![0.0; experts]);
        for (b, &fe) in bias.iter_mut().zip(f) {
            let err = target - fe;
            let s = if err > 0.0 {
                1.0
            } else if err < 0.0 {
                -1.0
            } else {
                0.0
            };
            *b += bias_step * s;
        }
        Ok(())
    }
}

fn price_loss(tape: &mut Tape, potential: &Potential, m: NodeId, p: NodeId) -> Result<NodeId> {
    let q = tape.stop_gradient_map(m, |mv| Ok(Tensor::vector(potential.aux_weight_clamped(mv.data())?)))?;
    let weighted = tape.mul(p, q)?;
    tape.sum(weighted)
}

/// ST-MoE auxiliary loss `Σ_e f_e · p_e` with `f` constant.
pub fn stmoe_aux_loss(tape: &mut Tape, f: &[f64], p: NodeId) -> Result<NodeId> {
    if tape.value(p).len() != f.len() {
        return Err(Error::Length {
            expected: tape.value(p).len(),
            got: f.len(),
        });
    }
    let f = tape.constant(Tensor::vector(f.to_vec()))?;
    let weighted = tape.mul(p, f)?;
    tape.sum(weighted)
}

/// `task + α · E · Σ_l aux_l`.
pub fn total_loss(tape: &mut Tape, task: NodeId, per_layer_aux: &[NodeId], alpha: f64, experts: usize) -> Result<NodeId> {
    let mut total = task;
    for &aux in per_layer_aux {
        let scaled = tape.scalar_mul(aux, alpha * experts as f64)?;
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BalancerSnapshot {
    m: Vec<f64>,
    eta: f64,
    alpha: f64,
    statistic: Statistic,
    mechanism: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phi: Option<Potential>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<Vec<f64>>,
    steps: u64,
}

impl From<BalancerState> for BalancerSnapshot {
    fn from(s: BalancerState) -> Self {
        let (phi, u) = match &s.mechanism {
            Mechanism::PhiBalancing(p) => (Some(*p), None),
            Mechanism::StMoe => (None, None),
            Mechanism::LossFree { bias_step } => (None, Some(*bias_step)),
        };
        Self {
            m: s.ema.m.clone(),
            eta: s.ema.eta,
            alpha: s.alpha,
            statistic: s.statistic,
            mechanism: s.mechanism.name().to_string(),
            phi,
            u,
            b: s.bias,
            steps: s.ema.steps,
        }
    }
}

impl TryFrom<BalancerSnapshot> for BalancerState {
    type Error = Error;

    fn try_from(s: BalancerSnapshot) -> Result<Self> {
        let mechanism = match (s.mechanism.as_str(), s.phi, s.u) {
            ("phi", Some(p), None) => Mechanism::PhiBalancing(p),
            ("st_moe", None, None) => Mechanism::StMoe,
            ("loss_free", None, Some(u)) => Mechanism::LossFree { bias_step: u },
            (other, ..) => return Err(Error::Config(format!("inconsistent balancer snapshot for mechanism `{other}`"))),
        };
        let mut state = BalancerState::new(s.m.len(), s.eta, s.alpha, s.statistic, mechanism)?;
        state.ema.m = s.m;
        state.ema.steps = s.steps;
        if let Some(b) = s.b {
            if b.len() != state.experts() {
                return Err(Error::Length {
                    expected: state.experts(),
                    got: b.len(),
                });
            }
            state.bias = Some(b);
        }
        Ok(state)
    }
}

/// Mean Jensen gap `E[φ(p̂_B)] − φ(p̄)` at one batch size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JensenGap {
    pub batch: usize,
    pub mean_gap: f64,
    pub std_err: f64,
}

/// Measures how far the batch-mean estimate `φ(p̂_B)` is biased above the
/// population value `φ(p̄)`, for each batch size, by drawing `n_batches`
/// batches with replacement from `population` (one routing distribution per
/// token).
pub fn jensen_gap<T: Scalar>(
    potential: &PotentialSpec<T>,
    population: &[Vec<T>],
    batch_sizes: &[usize],
    n_batches: usize,
    seed: u64,
) -> Result<Vec<JensenGap>> {
    let Some(first) = population.first() else {
        return Err(Error::InvalidParameter("empty token population".into()));
    };
    let experts = first.len();
    let mut pbar = vec![T::zero(); experts];
    for row in population {
        if row.len() != experts {
            return Err(Error::Length {
                expected: experts,
                got: row.len(),
            });
        }
        for (a, &x) in pbar.iter_mut().zip(row) {
            *a = *a + x;
        }
    }
    let n = T::lit(population.len() as f64);
    pbar.iter_mut().for_each(|a| *a = *a / n);
    let reference = potential.value(&pbar)?.to_f64_lossy();

    let mut out = Vec::with_capacity(batch_sizes.len());
    for (k, &b) in batch_sizes.iter().enumerate() {
        if b == 0 || n_batches < 2 {
            return Err(Error::InvalidParameter("batch size and batch count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut gaps = Vec::with_capacity(n_batches);
        for _ in 0..n_batches {
            let mut mean = vec![T::zero(); experts];
            for _ in 0..b {
                let row = &population[rng.gen_range(0..population.len())];
                for (a, &x) in mean.iter_mut().zip(row) {
                    *a = *a + x;
                }
            }
            let bt = T::lit(b as f64);
            mean.iter_mut().for_each(|a| *a = *a / bt);
            gaps.push(potential.value(&mean)?.to_f64_lossy() - reference);
        }
        let mean_gap = gaps.iter().sum::<f64>() / n_batches as f64;
        let var = gaps.iter().map(|g| (g - mean_gap).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
        out.push(JensenGap {
            batch: b,
            mean_gap,
            std_err: (var / n_batches as f64).sqrt(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, softmax};

    fn phi(p: Potential, eta: f64) -> BalancerState {
        BalancerState::new(2, eta, 0.01, Statistic::Probability, Mechanism::PhiBalancing(p)).unwrap()
    }

    #[test]
    fn ema_examples() {
        let mut e = EmaTracker::new(2, 1.0).unwrap();
        e.update(&[0.3, 0.7]).unwrap();
        assert_eq!(e.m(), &[0.3, 0.7]);

        let mut e = EmaTracker::<f64>::new(2, 0.5).unwrap();
        e.m = vec![0.5, 0.5];
        e.update(&[0.3, 0.7]).unwrap();
        assert!((e.m()[0] - 0.4).abs() < 1e-15 && (e.m()[1] - 0.6).abs() < 1e-15);

        let mut e = EmaTracker::new(2, 0.3).unwrap();
        for _ in 0..50 {
            e.update(&[0.2, 0.8]).unwrap();
        }
        // geometric series: m_t = p (1 − 0.7^t)
        let factor = 1.0 - 0.7f64.powi(50);
        assert!((e.m()[0] - 0.2 * factor).abs() < 1e-15);
        assert!((e.m()[0] - 0.2).abs() < 1e-7 && (e.m()[1] - 0.8).abs() < 1e-7);

        assert!(e.update(&[1.0]).is_err());
        assert!(EmaTracker::<f64>::new(2, 0.0).is_err());
        assert!(EmaTracker::<f64>::new(2, 1.5).is_err());
    }

    #[test]
    fn ema_mass_follows_geometric_series() {
        let mut e = EmaTracker::new(3, 0.37f32).unwrap();
        for t in 0..40 {
            let p = [0.2f32, 0.3, 0.5];
            e.update(&p).unwrap();
            let mass: f32 = e.m().iter().sum();
            assert!((mass - e.expected_mass()).abs() < 1e-5, "t={t}");
        }
    }

    #[test]
    fn phi_aux_loss_examples() {
        let mut s = phi(Potential::neg_shannon(), 1.0);
        s.ema_update(&[0.5, 0.5]).unwrap();
        let mut t = Tape::new();
        let p = t.leaf(Tensor::vector(vec![0.5, 0.5])).unwrap();
        let l = s.phi_aux_loss(&mut t, p).unwrap();
        assert!((t.value(l).item() - (1.0 - 2f64.ln())).abs() < 1e-6);

        let mut s = phi(Potential::euclidean(), 1.0);
        s.ema_update(&[0.9, 0.1]).unwrap();
        let mut t = Tape::new();
        let p = t.leaf(Tensor::vector(vec![0.9, 0.1])).unwrap();
        let l = s.phi_aux_loss(&mut t, p).unwrap();
        assert!((t.value(l).item() - 0.82).abs() < 1e-15);
        // gradient flows only through p
        let g = t.backward(l).unwrap().get(p);
        assert_eq!(g.data(), &[0.9, 0.1]);
    }

    #[test]
    fn tracked_loss_matches_plain_ema_bitwise() {
        let mut tracked = phi(Potential::neg_shannon(), 0.7);
        let mut plain = tracked.clone();
        for p in [[0.6, 0.4], [0.55, 0.45], [0.1, 0.9]] {
            let mut t = Tape::new();
            let pn = t.leaf(Tensor::vector(p.to_vec())).unwrap();
            let a = tracked.tracked_phi_aux_loss(&mut t, pn, &[]).unwrap();
            plain.ema_update(&p).unwrap();
            let b = plain.phi_aux_loss(&mut t, pn).unwrap();
            assert_eq!(tracked.m(), plain.m());
            assert_eq!(t.value(a).item().to_bits(), t.value(b).item().to_bits());
        }
        assert_eq!(tracked.ema().steps(), 3);
    }

    #[test]
    fn router_gradient_of_phi_loss_with_frozen_prices() {
        // aux = Σ softmax(z)_e q_e; ∂/∂z matches central differences with q fixed
        let mut s = phi(Potential::neg_shannon(), 0.5);
        s.ema_update(&[0.8, 0.2]).unwrap();
        let z0 = vec![0.4, -0.3];
        let mut t = Tape::new();
        let z = t.leaf(Tensor::matrix(1, 2, z0.clone()).unwrap()).unwrap();
        let p = t.softmax_rows(z).unwrap();
        let p = t.mean_rows(p).unwrap();
        let l = s.phi_aux_loss(&mut t, p).unwrap();
        let g = t.backward(l).unwrap().get(z);
        let q = Potential::neg_shannon().link(s.m()).unwrap();
        let fd = central_difference(
            |ps| {
                let sm = softmax(ps[0].data());
                sm[0] * q[0] + sm[1] * q[1]
            },
            &[Tensor::matrix(1, 2, z0).unwrap()],
            1e-5,
        );
        for (a, b) in g.data().iter().zip(fd[0].data()) {
            assert!((a - b).abs() / a.abs().max(1e-8) < 1e-6);
        }
        // over-loaded expert 0 gets a negative-going logit update direction
        assert!(g.data()[0] > 0.0);
    }

    #[test]
    fn stmoe_examples() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::vector(vec![0.5, 0.5])).unwrap();
        let l = stmoe_aux_loss(&mut t, &[0.5, 0.5], p).unwrap();
        assert_eq!(t.value(l).item(), 0.5);
        let p = t.leaf(Tensor::vector(vec![0.9, 0.1])).unwrap();
        let l = stmoe_aux_loss(&mut t, &[1.0, 0.0], p).unwrap();
        assert_eq!(t.value(l).item(), 0.9);
        let e = 8;
        let p = t.leaf(Tensor::vector(vec![1.0 / e as f64; e])).unwrap();
        let l = stmoe_aux_loss(&mut t, &vec![1.0 / e as f64; e], p).unwrap();
        assert!((t.value(l).item() - 1.0 / e as f64).abs() < 1e-15);
        assert!(stmoe_aux_loss(&mut t, &[1.0], p).is_err());
    }

    #[test]
    fn loss_free_examples() {
        let mut s = BalancerState::new(2, 0.5, 0.0, Statistic::Probability, Mechanism::LossFree { bias_step: 0.01 }).unwrap();
        s.loss_free_step(&[0.75, 0.25]).unwrap();
        assert_eq!(s.bias().unwrap(), &[-0.01, 0.01]);

        let mut s = BalancerState::new(4, 0.5, 0.0, Statistic::Probability, Mechanism::LossFree { bias_step: 0.01 }).unwrap();
        s.loss_free_step(&[0.25; 4]).unwrap();
        assert_eq!(s.bias().unwrap(), &[0.0; 4]);

        let mut s = BalancerState::new(3, 0.5, 0.0, Statistic::Probability, Mechanism::LossFree { bias_step: 1e-3 }).unwrap();
        let mut prev = s.bias().unwrap().to_vec();
        for _ in 0..100 {
            s.loss_free_step(&[0.6, 0.3, 0.1]).unwrap();
            let b = s.bias().unwrap();
            assert!(b[2] > prev[2] && b[0] < prev[0]);
            prev = b.to_vec();
        }
        assert!(phi(Potential::euclidean(), 0.5).loss_free_step(&[0.5, 0.5]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let mut t = Tape::new();
        let task = t.leaf(Tensor::scalar(2.0)).unwrap();
        let aux = t.leaf(Tensor::scalar(0.1)).unwrap();
        let l = total_loss(&mut t, task, &[aux], 0.01, 16).unwrap();
        assert!((t.value(l).item() - 2.016).abs() < 1e-15);
        let l = total_loss(&mut t, task, &[], 0.01, 16).unwrap();
        assert_eq!(t.value(l).item(), 2.0);
        let l = total_loss(&mut t, task, &[aux], 0.0, 16).unwrap();
        assert_eq!(t.value(l).item(), 2.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = BalancerState::new(3, 0.7, 0.01, Statistic::Frequency, Mechanism::PhiBalancing("lp:p=3".parse().unwrap())).unwrap();
        s.ema_update(&[0.1, 0.2, 0.7]).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"mechanism\":\"phi\"") && json.contains("\"phi\":\"lp:p=3\""));
        let back: BalancerState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);

        let mut s = BalancerState::new(2, 0.7, 0.0, Statistic::Probability, Mechanism::LossFree { bias_step: 0.002 }).unwrap();
        s.loss_free_step(&[0.9, 0.1]).unwrap();
        let back: BalancerState = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<BalancerState>(r#"{"m":[0,0],"eta":0.5,"alpha":1,"statistic":"probability","mechanism":"phi","steps":0}"#).is_err());
    }

    #[test]
    fn jensen_gap_shrinks_with_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let population: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
                softmax(&z)
            })
            .collect();
        let gaps = jensen_gap(&Potential::neg_shannon(), &population, &[1, 4, 16, 64], 500, 11).unwrap();
        assert!(gaps.iter().all(|g| g.mean_gap > 0.0));
        assert!(gaps.windows(2).all(|w| w[1].mean_gap < w[0].mean_gap));
    }

    #[test]
    fn from_state_resumes() {
        let mut e = EmaTracker::from_state(vec![0.2, 0.8], 0.5).unwrap();
        e.update(&[1.0, 0.0]).unwrap();
        assert_eq!(e.m(), &[0.6, 0.4]);
        assert!(EmaTracker::from_state(vec![0.5], 1.5).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn positive(e: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.01f64..1.0, e)
        }

        proptest! {
            #[test]
            fn busier_experts_get_higher_prices(m in positive(5), idx in 0usize..9) {
                let phi = Potential::catalog()[idx];
                let q = phi.aux_weight(&m).unwrap();
                for i in 0..5 {
                    for j in 0..5 {
                        if m[i] > m[j] + 1e-9 {
                            prop_assert!(q[i] >= q[j], "{phi}: m {m:?} q {q:?}");
                        }
                    }
                }
            }

            #[test]
            fn descent_shifts_logits_from_the_priciest_expert(
                z in prop::collection::vec(-2.0f64..2.0, 5),
                m in positive(5),
                idx in 0usize..9,
            ) {
                let phi = Potential::catalog()[idx];
                let mut state = BalancerState::new(5, 1.0, 1.0, Statistic::Probability, Mechanism::PhiBalancing(phi)).unwrap();
                state.ema_update(&m).unwrap();
                let q = phi.aux_weight(&m).unwrap();
                let p = softmax(&z);
                let mean_price: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
                let top = (0..5).fold(0, |b, i| if q[i] > q[b] { i } else { b });

                let mut t = Tape::new();
                let logits = t.leaf(Tensor::matrix(1, 5, z.clone()).unwrap()).unwrap();
                let probs = t.softmax_rows(logits).unwrap();
                let pb = t.mean_rows(probs).unwrap();
                let loss = state.phi_aux_loss(&mut t, pb).unwrap();
                let g = t.backward(loss).unwrap().get(logits);
                // ∂/∂z_i Σ p q = p_i (q_i − ⟨p, q⟩)
                for j in 0..5 {
                    prop_assert!((g.data()[j] - p[j] * (q[j] - mean_price)).abs() < 1e-12);
                    if q[j] < mean_price {
                        prop_assert!(g.data()[top] > g.data()[j], "{phi}: {:?}", g.data());
                    }
                }
            }
        }
    }
}
