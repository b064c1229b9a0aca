//! Self-checks run by `phibal check`: uniform minimiser, link/conjugate
//! duality, the mirror-ascent step, gradient and stop-gradient checks, the
//! Jensen gap, metric identities and the token budget.
//!
//! Numeric tolerances are multiplied by [`CheckOptions::tolerance`]; exact
//! identities ignore it.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::autodiff::{central_difference, max_tensor_relative_error, Tape, Tensor};
use crate::balancer::{jensen_gap, BalancerState, EmaTracker, Mechanism, Statistic};
use crate::corpus::{CorpusSpec, LabelRule};
use crate::error::Result;
use crate::metrics::{gini, max_vio, routed_token_ratio};
use crate::moe::MoeLayerParams;
use crate::trainer::{compute_token_budget, Model, ModelConfig, PriceMode, Task};
use crate::Potential;

/// Finite-difference step of the gradient suite.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for per-tensor gradient relative errors.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Multiplier on every numeric tolerance.
    pub tolerance: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { seed: 0, tolerance: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

type Suite = fn(&CheckOptions) -> Result<(bool, String)>;

/// Every suite in a fixed order.
pub const SUITES: [(&str, Suite); 8] = [
    ("uniform-minimizer", uniform_minimizer),
    ("link-duality", link_duality),
    ("mirror-step", mirror_step),
    ("gradients", gradients),
    ("stop-gradient", stop_gradient),
    ("jensen-gap", jensen_bias),
    ("metrics", metric_identities),
    ("token-budget", token_budget),
];

/// Runs every suite; a suite that errors counts as failed.
pub fn run_all(opts: &CheckOptions) -> CheckReport {
    let outcomes = SUITES
        .iter()
        .map(|&(name, suite)| {
            let start = Instant::now();
            let (passed, detail) = suite(opts).unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckOutcome {
                name,
                passed,
                detail,
                elapsed: start.elapsed(),
            }
        })
        .collect();
    CheckReport { outcomes }
}

fn rng(opts: &CheckOptions, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
    r.set_stream(stream);
    r
}

/// Flat-Dirichlet draw on the simplex.
pub fn random_simplex(rng: &mut impl Rng, e: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..e).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Simplex point with every entry at least `floor / e`.
fn interior(rng: &mut impl Rng, e: usize, floor: f64) -> Vec<f64> {
    let u = 1.0 / e as f64;
    random_simplex(rng, e).into_iter().map(|x| (1.0 - floor) * x + floor * u).collect()
}

fn uniform_minimizer(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 1);
    let mut violations = 0;
    let mut checked = 0;
    for phi in Potential::catalog() {
        for e in [2, 4, 8] {
            let u = vec![1.0 / e as f64; e];
            let vu = phi.value(&u)?;
            for i in 0..200 {
                let mut p = random_simplex(&mut r, e);
                if i % 2 == 1 {
                    // near-uniform points
                    let s = 10f64.powf(r.gen_range(-3.0..0.0));
                    p.iter_mut().for_each(|x| *x = (1.0 - s) * (1.0 / e as f64) + s * *x);
                }
                let vp = phi.value(&p)?;
                let dev = p.iter().map(|x| (x - 1.0 / e as f64).abs()).fold(0.0, f64::max);
                if vu > vp || (dev > 1e-6 && vp - vu <= 0.0) {
                    violations += 1;
                }
                checked += 1;
            }
        }
    }
    Ok((violations == 0, format!("{violations} violations in {checked} points")))
}

fn link_duality(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 2);
    let (mut worst_inv, mut worst_fy) = (0.0f64, 0.0f64);
    let mut ok = true;
    for phi in Potential::catalog() {
        let (inv_tol, fy_tol) = if phi.has_numeric_conjugate() { (1e-5, 1e-4) } else { (1e-8, 1e-6) };
        for _ in 0..50 {
            let m = interior(&mut r, 4, 0.2);
            let q = phi.link(&m)?;
            let back = phi.inverse_link(&q)?;
            let inv = m.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let fy = (phi.value(&m)? + phi.conjugate_value(&q) - m.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()).abs();
            ok &= inv <= inv_tol * opts.tolerance && fy <= fy_tol * opts.tolerance;
            worst_inv = worst_inv.max(inv / inv_tol);
            worst_fy = worst_fy.max(fy / fy_tol);
        }
    }
    Ok((
        ok,
        format!("worst inverse error {worst_inv:.2e} of tolerance, worst Fenchel-Young gap {worst_fy:.2e} of tolerance"),
    ))
}

/// Maximiser of a unimodal `f` on `[lo, hi]`.
pub fn golden_section_max(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        }
    }
    (lo + hi) / 2.0
}

/// Solves `argmax_q ⟨p − m, q⟩ − D_{φ*}(q, q_t) / η` by coordinate golden
/// section, using `φ*` values only. `q_t = ∇φ(m)`.
pub fn mirror_ascent_step(phi: &Potential, m: &[f64], p: &[f64], eta: f64) -> Result<Vec<f64>> {
    let qt = phi.link(m)?;
    let base = phi.conjugate_value(&qt);
    let objective = |q: &[f64]| {
        let lin: f64 = q.iter().zip(p).zip(m).map(|((qi, pi), mi)| (pi - mi) * qi).sum();
        let bregman = phi.conjugate_value(q) - base - q.iter().zip(&qt).zip(m).map(|((qi, ti), mi)| mi * (qi - ti)).sum::<f64>();
        lin - bregman / eta
    };
    let mut q = qt.clone();
    for _ in 0..4 {
        for i in 0..q.len() {
            let centre = q[i];
            let mut trial = q.clone();
            q[i] = golden_section_max(
                |x| {
                    trial[i] = x;
                    objective(&trial)
                },
                centre - 20.0,
                centre + 20.0,
                1e-11,
            );
        }
    }
    Ok(q)
}

fn mirror_step(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 3);
    let mut worst = 0.0f64;
    for phi in [Potential::neg_shannon(), Potential::euclidean()] {
        for _ in 0..20 {
            let e = 4;
            let m = interior(&mut r, e, 0.3);
            let p = random_simplex(&mut r, e);
            let eta = r.gen_range(0.05..1.0);
            let mut ema = EmaTracker::from_state(m.clone(), eta)?;
            ema.update(&p)?;
            let closed = phi.link(ema.m())?;
            let numeric = mirror_ascent_step(&phi, &m, &p, eta)?;
            let err = closed.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
        }
    }
    Ok((worst <= 1e-6 * opts.tolerance, format!("max |Δq| = {worst:.2e}")))
}

/// One gradient-checked loss.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub mechanism: Mechanism,
    pub label: LabelRule,
    pub alpha: f64,
    pub root: GradRoot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradRoot {
    Task,
    /// Last layer's auxiliary loss.
    Aux,
    Total,
}

/// Task losses, the ST-MoE term, each catalog aux loss and a full total.
pub fn grad_cases() -> Vec<GradCase> {
    let case = |name: String, mechanism, label, alpha, root| GradCase {
        name,
        mechanism,
        label,
        alpha,
        root,
    };
    let mut out = vec![
        case("task/classification".into(), Mechanism::StMoe, LabelRule::DomainId, 0.0, GradRoot::Task),
        case(
            "task/regression".into(),
            Mechanism::StMoe,
            LabelRule::LinearTeacher { outputs: 2 },
            0.0,
            GradRoot::Task,
        ),
        case("aux/st_moe".into(), Mechanism::StMoe, LabelRule::DomainId, 0.1, GradRoot::Aux),
    ];
    for phi in Potential::catalog() {
        out.push(case(
            format!("aux/{phi}"),
            Mechanism::PhiBalancing(phi),
            LabelRule::DomainId,
            0.1,
            GradRoot::Aux,
        ));
    }
    out.push(case(
        "total/neg_shannon".into(),
        Mechanism::PhiBalancing(Potential::neg_shannon()),
        LabelRule::DomainId,
        0.1,
        GradRoot::Total,
    ));
    out
}

/// Small model used by the gradient suites.
pub fn grad_model_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        experts: 4,
        top_k: 2,
        d: 3,
        d_ffn: 2,
    }
}

/// Analytic vs central-difference relative error of `case` on instance
/// `instance`, or `None` when a perturbation flips a top-k selection.
pub fn grad_case_error(case: &GradCase, seed: u64, instance: u64) -> Result<Option<f64>> {
    let dims = grad_model_config();
    let mut spec = CorpusSpec::new(3, dims.d).with_seed(seed ^ instance);
    spec.label = case.label;
    let corpus = spec.build()?;
    let batch = corpus.sample_batch(6, instance)?;
    let task = match case.label {
        LabelRule::DomainId => Task::Classification { classes: 3 },
        LabelRule::LinearTeacher { outputs } => Task::Regression { outputs },
    };
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(instance);
    let model = Model::init(&dims, task, &mut r)?;
    let mut balancers: Vec<BalancerState> = (0..dims.layers)
        .map(|_| BalancerState::new(dims.experts, 0.5, case.alpha, Statistic::Probability, case.mechanism.clone()))
        .collect::<Result<_>>()?;
    // give m a nonzero history
    for s in 0..2 {
        let warm = corpus.sample_batch(6, 1000 + s)?;
        model.forward(&warm, &mut balancers, case.alpha, PriceMode::Tracked)?;
    }
    let root = |pass: &crate::trainer::ForwardPass| match case.root {
        GradRoot::Task => pass.task,
        GradRoot::Aux => *pass.aux.last().expect("aux loss present"),
        GradRoot::Total => pass.total,
    };
    let reference = model.forward(&batch, &mut balancers.clone(), case.alpha, PriceMode::Frozen)?;
    let analytic = reference.gradients(root(&reference))?;
    let selections: Vec<Vec<Vec<usize>>> = reference.routed.iter().map(|r| r.batch.selections().to_vec()).collect();
    let mut flipped = false;
    let mut failure = None;
    let numeric = central_difference(
        |params| {
            let mut eval = || -> Result<f64> {
                let m = Model::from_params(&dims, task, params.to_vec())?;
                let pass = m.forward(&batch, &mut balancers.clone(), case.alpha, PriceMode::Frozen)?;
                if pass.routed.iter().zip(&selections).any(|(r, s)| r.batch.selections() != s.as_slice()) {
                    flipped = true;
                }
                Ok(pass.tape.value(root(&pass)).item())
            };
            eval().unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        },
        model.params(),
        FD_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    if flipped {
        return Ok(None);
    }
    Ok(Some(max_tensor_relative_error(&analytic, &numeric, GRAD_FLOOR)))
}

/// Worst error of `case` over `instances` valid instances, drawing
/// replacements for ones with selection flips.
pub fn grad_case_worst(case: &GradCase, seed: u64, instances: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut valid = 0;
    let mut i = 0u64;
    while valid < instances {
        if i > 20 * instances as u64 {
            return Err(crate::Error::Numerical {
                step: i,
                reason: format!("{}: too many selection flips", case.name),
            });
        }
        if let Some(err) = grad_case_error(case, seed, i)? {
            worst = worst.max(err);
            valid += 1;
        }
        i += 1;
    }
    Ok(worst)
}

fn gradients(opts: &CheckOptions) -> Result<(bool, String)> {
    let tol = 1e-4 * opts.tolerance;
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for case in grad_cases() {
        let err = grad_case_worst(&case, opts.seed, 5)?;
        worst = worst.max(err);
        if !(err < tol) {
            failed.push(format!("{} ({err:.2e})", case.name));
        }
    }
    let detail = if failed.is_empty() {
        format!("worst relative error {worst:.2e}")
    } else {
        format!("failed: {}", failed.join(", "))
    };
    Ok((failed.is_empty(), detail))
}

fn stop_gradient(opts: &CheckOptions) -> Result<(bool, String)> {
    let dims = grad_model_config();
    let phi = Potential::neg_shannon();
    let corpus = CorpusSpec::new(3, dims.d).with_seed(opts.seed).build()?;
    let batch = corpus.sample_batch(8, 0)?;
    let mut r = rng(opts, 5);
    let model = Model::init(&dims, Task::Classification { classes: 3 }, &mut r)?;
    let mut balancers: Vec<BalancerState> = (0..dims.layers)
        .map(|_| BalancerState::new(dims.experts, 0.3, 0.1, Statistic::Probability, Mechanism::PhiBalancing(phi)))
        .collect::<Result<_>>()?;
    model.forward(&corpus.sample_batch(8, 1)?, &mut balancers, 0.1, PriceMode::Tracked)?;

    let tracked = model.forward(&batch, &mut balancers, 0.1, PriceMode::Tracked)?;
    // balancers now hold m_{t+1}; pricing from them with m frozen must agree
    let frozen = model.forward(&batch, &mut balancers.clone(), 0.1, PriceMode::Frozen)?;
    let mut identical = true;
    for l in 0..dims.layers {
        let a = tracked.gradients(tracked.aux[l])?;
        let b = frozen.gradients(frozen.aux[l])?;
        let idx = model.router_index(l);
        identical &= a[idx].data().iter().zip(b[idx].data()).all(|(x, y)| x.to_bits() == y.to_bits());
    }

    // without the stop-gradient the router gradient changes
    let layer = MoeLayerParams::init(dims.experts, dims.top_k, dims.d, dims.d_ffn, &mut r)?;
    let m_prev = balancers[0].m().to_vec();
    let router_grad = |leak: bool| -> Result<Tensor> {
        let mut tape = Tape::new();
        let l = layer.register(&mut tape)?;
        let x = tape.constant(batch.x.clone())?;
        let routed = l.route(&mut tape, x, None)?;
        let prev = tape.constant(Tensor::vector(m_prev.clone()))?;
        let kept = tape.scalar_mul(prev, 0.7)?;
        let fresh = tape.scalar_mul(routed.p_bar, 0.3)?;
        let m = tape.add(kept, fresh)?;
        let m = if leak { m } else { tape.stop_gradient(m)? };
        let lg = tape.log(m)?;
        let q = tape.add_scalar(lg, 1.0)?;
        let w = tape.mul(routed.p_bar, q)?;
        let loss = tape.sum(w)?;
        Ok(tape.backward(loss)?.get(l.router()))
    };
    let leak_differs = router_grad(true)? != router_grad(false)?;
    Ok((
        identical && leak_differs,
        format!("frozen path bit-identical: {identical}; leaking variant differs: {leak_differs}"),
    ))
}

/// Per-token routing distributions with a skewed mean.
pub fn synthetic_population(rng: &mut impl Rng, tokens: usize, experts: usize) -> Vec<Vec<f64>> {
    let skew: Vec<f64> = (0..experts).map(|e| 0.3 * e as f64).collect();
    (0..tokens)
        .map(|_| {
            let z: Vec<f64> = skew.iter().map(|s| s + 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            crate::autodiff::softmax(&z)
        })
        .collect()
}

/// Gaps must be positive; at most one increase, no larger than two
/// combined standard errors.
pub fn gaps_monotone(gaps: &[crate::balancer::JensenGap]) -> bool {
    if gaps.iter().any(|g| !(g.mean_gap > 0.0)) {
        return false;
    }
    let mut inversions = 0;
    for w in gaps.windows(2) {
        if w[1].mean_gap > w[0].mean_gap {
            inversions += 1;
            if w[1].mean_gap - w[0].mean_gap > 2.0 * w[0].std_err.hypot(w[1].std_err) {
                return false;
            }
        }
    }
    inversions <= 1
}

fn jensen_bias(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 6);
    let population = synthetic_population(&mut r, 4096, 8);
    let gaps = jensen_gap(&Potential::neg_shannon(), &population, &[1, 4, 16, 64], 1000, opts.seed)?;
    let detail = gaps
        .iter()
        .map(|g| format!("B={}: {:.4}±{:.4}", g.batch, g.mean_gap, g.std_err))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((gaps_monotone(&gaps), detail))
}

fn metric_identities(opts: &CheckOptions) -> Result<(bool, String)> {
    let mut ok = max_vio(&[3.0, 1.0])? == 0.5 && gini(&[1.0, 0.0, 0.0, 0.0])? == 0.75;
    let mut r = rng(opts, 7);
    for _ in 0..100 {
        let e = r.gen_range(2..10);
        let loads: Vec<f64> = (0..e).map(|_| r.gen_range(0.0..10.0)).collect();
        let mut perm = loads.clone();
        perm.reverse();
        perm.rotate_left(r.gen_range(0..e));
        let c = r.gen_range(0.1..100.0);
        let scaled: Vec<f64> = loads.iter().map(|x| x * c).collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * opts.tolerance * a.abs().max(1.0);
        for f in [max_vio::<f64>, gini::<f64>] {
            let v = f(&loads)?;
            ok &= close(v, f(&perm)?) && close(v, f(&scaled)?);
        }
        let sel: Vec<Vec<usize>> = (0..50).map(|_| vec![r.gen_range(0..e), r.gen_range(0..e)]).collect();
        let dom: Vec<usize> = (0..50).map(|_| r.gen_range(0..3)).collect();
        for row in routed_token_ratio(&sel, &dom, e, 3)?.into_iter().flatten() {
            ok &= (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9 * opts.tolerance;
        }
    }
    Ok((ok, "exact values, invariances and row sums".into()))
}

fn token_budget(opts: &CheckOptions) -> Result<(bool, String)> {
    let tpp = compute_token_budget(1.0)?.tokens_per_param;
    let mut ok = (tpp - 27.27).abs() <= 0.05 * opts.tolerance;
    let mut ratios = Vec::new();
    for c in [1.0, 1e12, 1e18] {
        let b = compute_token_budget(c)?;
        let ratio = b.params * b.tokens / c;
        ok &= (0.999..=1.002).contains(&ratio);
        ratios.push(format!("{ratio:.6}"));
    }
    Ok((ok, format!("tpp(1) = {tpp:.4}, M·D/C = {}", ratios.join(", "))))
}
