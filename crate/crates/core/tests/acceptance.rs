//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Oracles live here and only call the library for the quantity
//! under test.

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use phibal::autodiff::{Tape, Tensor};
use phibal::balancer::{jensen_gap, BalancerState, EmaTracker, Mechanism, Statistic};
use phibal::corpus::{CorpusSpec, LabelRule};
use phibal::experiment::{read_run_csv, resolve_jobs, run_plan, terminal_metrics, ExperimentPlan, RunStatus, SweepAxis};
use phibal::metrics::{gini, max_vio, routed_token_ratio};
use phibal::moe::MoeLayerParams;
use phibal::trainer::{compute_token_budget, train, MechanismKind, Model, ModelConfig, PriceMode, RunRecord, Task, TrainConfig};
use phibal::Potential;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(20_240_601);
    r.set_stream(stream);
    r
}

fn simplex(r: &mut impl Rng, e: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..e).map(|_| -(1.0 - r.gen::<f64>()).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform_minimizer() -> Outcome {
    let mut r = rng(1);
    let mut violations = Vec::new();
    for phi in Potential::catalog() {
        for e in [2usize, 4, 8] {
            let u = vec![1.0 / e as f64; e];
            let vu = phi.value(&u).map_err(|x| x.to_string())?;
            for _ in 0..200 {
                let p = simplex(&mut r, e);
                let vp = phi.value(&p).map_err(|x| x.to_string())?;
                let dist = p.iter().map(|x| (x - u[0]).abs()).fold(0.0, f64::max);
                if vu > vp || (dist > 1e-6 && vp <= vu) {
                    violations.push(format!("{phi} E={e}"));
                }
            }
        }
    }
    check(violations.is_empty(), format!("{} violations over 9×3×200 points", violations.len()))
}

fn duality() -> Outcome {
    let mut r = rng(2);
    let mut worst = (0.0f64, 0.0f64);
    let mut bad = Vec::new();
    for phi in Potential::catalog() {
        let numeric = phi.has_numeric_conjugate();
        let (inv_tol, fy_tol) = if numeric { (1e-5, 1e-4) } else { (1e-8, 1e-6) };
        for _ in 0..50 {
            let m: Vec<f64> = simplex(&mut r, 4).iter().map(|x| 0.8 * x + 0.05).collect();
            let q = phi.link(&m).map_err(|x| x.to_string())?;
            let back = phi.inverse_link(&q).map_err(|x| x.to_string())?;
            let inv = m.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let fy = (phi.value(&m).map_err(|x| x.to_string())? + phi.conjugate_value(&q) - dot(&m, &q)).abs();
            worst = (worst.0.max(inv), worst.1.max(fy));
            if inv > inv_tol || fy > fy_tol {
                bad.push(format!("{phi}: inverse {inv:.1e}, FY {fy:.1e}"));
            }
        }
    }
    check(
        bad.is_empty(),
        format!("max inverse error {:.1e}, max Fenchel-Young gap {:.1e} {}", worst.0, worst.1, bad.join("; ")),
    )
}

/// Bisection on the finite-difference derivative of a concave 1-D function.
fn concave_argmax(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let h = 1e-6;
    let slope = |x: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn mirror_step() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for phi in [Potential::neg_shannon(), Potential::euclidean()] {
        for _ in 0..20 {
            let m: Vec<f64> = simplex(&mut r, 5).iter().map(|x| 0.7 * x + 0.06).collect();
            let p = simplex(&mut r, 5);
            let eta = r.gen_range(0.05..=1.0);
            let mut ema = EmaTracker::from_state(m.clone(), eta).map_err(|x| x.to_string())?;
            ema.update(&p).map_err(|x| x.to_string())?;
            let closed = phi.link(ema.m()).map_err(|x| x.to_string())?;

            // argmax_q ⟨p − m, q⟩ − (φ*(q) − φ*(q_t) − ⟨m, q − q_t⟩)/η, with ∇φ*(q_t) = m
            let qt = phi.link(&m).map_err(|x| x.to_string())?;
            let mut q = qt.clone();
            for _sweep in 0..3 {
                for i in 0..q.len() {
                    let base = q.clone();
                    let obj = |x: f64| {
                        let mut v = base.clone();
                        v[i] = x;
                        let lin: f64 = (0..v.len()).map(|j| (p[j] - m[j]) * v[j]).sum();
                        let breg = phi.conjugate_value(&v) - phi.conjugate_value(&qt) - (0..v.len()).map(|j| m[j] * (v[j] - qt[j])).sum::<f64>();
                        lin - breg / eta
                    };
                    q[i] = concave_argmax(obj, qt[i] - 25.0, qt[i] + 25.0);
                }
            }
            worst = worst.max(closed.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    check(worst < 1e-6, format!("max |q_closed − q_numeric| = {worst:.2e} over 40 triples"))
}

#[derive(Clone, Copy)]
enum Root {
    Task,
    Aux,
    Total,
}

fn fd_check(mechanism: Mechanism, label: LabelRule, alpha: f64, root: Root, instance: u64) -> Result<Option<f64>, String> {
    let s = |e: phibal::Error| e.to_string();
    let dims = ModelConfig {
        layers: 2,
        experts: 4,
        top_k: 2,
        d: 4,
        d_ffn: 2,
    };
    let task = match label {
        LabelRule::DomainId => Task::Classification { classes: 3 },
        LabelRule::LinearTeacher { outputs } => Task::Regression { outputs },
    };
    let mut spec = CorpusSpec::new(3, dims.d).with_seed(100 + instance);
    spec.label = label;
    let corpus = spec.build().map_err(s)?;
    let batch = corpus.sample_batch(5, instance).map_err(s)?;
    let model = Model::init(&dims, task, &mut rng(1000 + instance)).map_err(s)?;
    let mut states: Vec<BalancerState> = (0..dims.layers)
        .map(|_| BalancerState::new(dims.experts, 0.4, alpha, Statistic::Probability, mechanism.clone()))
        .collect::<Result<_, _>>()
        .map_err(s)?;
    for w in 0..3 {
        model
            .forward(&corpus.sample_batch(5, 500 + w).map_err(s)?, &mut states, alpha, PriceMode::Tracked)
            .map_err(s)?;
    }
    let pick = |p: &phibal::trainer::ForwardPass| match root {
        Root::Task => p.task,
        Root::Aux => p.aux[p.aux.len() - 1],
        Root::Total => p.total,
    };
    let pass = model.forward(&batch, &mut states.clone(), alpha, PriceMode::Frozen).map_err(s)?;
    let analytic = pass.gradients(pick(&pass)).map_err(s)?;
    let sel: Vec<Vec<Vec<usize>>> = pass.routed.iter().map(|r| r.batch.selections().to_vec()).collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut params = model.params().to_vec();
    for t in 0..params.len() {
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for i in 0..params[t].len() {
            let orig = params[t].data()[i];
            let mut eval = |x: f64| -> Result<Option<f64>, String> {
                params[t].data_mut()[i] = x;
                let m = Model::from_params(&dims, task, params.clone()).map_err(s)?;
                let p = m.forward(&batch, &mut states.clone(), alpha, PriceMode::Frozen).map_err(s)?;
                let same = p.routed.iter().zip(&sel).all(|(r, s)| r.batch.selections() == s.as_slice());
                Ok(same.then(|| p.tape.value(pick(&p)).item()))
            };
            let (Some(up), Some(down)) = (eval(orig + h)?, eval(orig - h)?) else {
                return Ok(None);
            };
            params[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[t].data()[i];
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            nu2 += numeric * numeric;
        }
        let scale = an2.sqrt().max(nu2.sqrt()).max(1e-6);
        worst = worst.max(diff2.sqrt() / scale);
    }
    Ok(Some(worst))
}

fn gradient_suite() -> Outcome {
    let shannon = Mechanism::PhiBalancing(Potential::neg_shannon());
    let mut cases: Vec<(String, Mechanism, LabelRule, f64, Root)> = vec![
        ("task-ce".into(), Mechanism::StMoe, LabelRule::DomainId, 0.0, Root::Task),
        ("task-mse".into(), Mechanism::StMoe, LabelRule::LinearTeacher { outputs: 3 }, 0.0, Root::Task),
        ("st_moe".into(), Mechanism::StMoe, LabelRule::DomainId, 0.05, Root::Aux),
        ("total".into(), shannon, LabelRule::DomainId, 0.05, Root::Total),
    ];
    for phi in Potential::catalog() {
        cases.push((phi.to_string(), Mechanism::PhiBalancing(phi), LabelRule::DomainId, 0.05, Root::Aux));
    }
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, mech, label, alpha, root) in cases {
        let mut errs = Vec::new();
        let mut i = 0;
        while errs.len() < 5 && i < 100 {
            if let Some(e) = fd_check(mech.clone(), label, alpha, root, i)? {
                errs.push(e);
            }
            i += 1;
        }
        if errs.len() < 5 {
            return Err(format!("{name}: too few instances without selection flips"));
        }
        worst.push((name, errs.into_iter().fold(0.0, f64::max)));
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let failing: Vec<String> = worst.iter().filter(|w| w.1.is_nan() || w.1 >= 1e-4).map(|w| format!("{} {:.1e}", w.0, w.1)).collect();
    check(failing.is_empty(), format!("{} losses × 5 instances, max relative error {max:.1e} {}", worst.len(), failing.join(", ")))
}

fn stop_gradient() -> Outcome {
    let s = |e: phibal::Error| e.to_string();
    let dims = ModelConfig {
        layers: 2,
        experts: 6,
        top_k: 2,
        d: 5,
        d_ffn: 3,
    };
    let corpus = CorpusSpec::new(3, dims.d).with_seed(9).build().map_err(s)?;
    let model = Model::init(&dims, Task::Classification { classes: 3 }, &mut rng(5)).map_err(s)?;
    let mut all_equal = true;
    for phi in Potential::catalog() {
        let mut states: Vec<BalancerState> = (0..dims.layers)
            .map(|_| BalancerState::new(dims.experts, 0.3, 0.1, Statistic::Probability, Mechanism::PhiBalancing(phi)))
            .collect::<Result<_, _>>()
            .map_err(s)?;
        for step in 0..3 {
            let batch = corpus.sample_batch(16, step).map_err(s)?;
            let production = model.forward(&batch, &mut states, 0.1, PriceMode::Tracked).map_err(s)?;
            // `states` now holds m_{t+1}; price from it as a frozen constant
            let frozen = model.forward(&batch, &mut states.clone(), 0.1, PriceMode::Frozen).map_err(s)?;
            for l in 0..dims.layers {
                let a = production.gradients(production.aux[l]).map_err(s)?;
                let b = frozen.gradients(frozen.aux[l]).map_err(s)?;
                let ri = model.router_index(l);
                all_equal &= a[ri].data().iter().zip(b[ri].data()).all(|(x, y)| x.to_bits() == y.to_bits());
            }
        }
    }

    // control: a price that is differentiated through m yields another gradient
    let layer = MoeLayerParams::init(dims.experts, 2, dims.d, dims.d_ffn, &mut rng(6)).map_err(s)?;
    let x = corpus.sample_batch(16, 0).map_err(s)?.x;
    let grad = |stop: bool| -> Result<Tensor, phibal::Error> {
        let mut tape = Tape::new();
        let l = layer.register(&mut tape)?;
        let xi = tape.constant(x.clone())?;
        let routed = l.route(&mut tape, xi, None)?;
        let prev = tape.constant(Tensor::vector(vec![1.0 / 6.0; 6]))?;
        let a = tape.scalar_mul(prev, 0.5)?;
        let b = tape.scalar_mul(routed.p_bar, 0.5)?;
        let mut m = tape.add(a, b)?;
        if stop {
            m = tape.stop_gradient(m)?;
        }
        let lm = tape.log(m)?;
        let q = tape.add_scalar(lm, 1.0)?;
        let pq = tape.mul(routed.p_bar, q)?;
        let loss = tape.sum(pq)?;
        Ok(tape.backward(loss)?.get(l.router()))
    };
    let leak_differs = grad(true).map_err(s)? != grad(false).map_err(s)?;
    check(
        all_equal && leak_differs,
        format!("tracked vs frozen router gradients bit-identical: {all_equal}; leaking control differs: {leak_differs}"),
    )
}

fn desk_config(seed: u64, mech: MechanismKind, alpha: f64, stat: Statistic) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    c.model.experts = 8;
    c.model.top_k = 2;
    c.model.layers = 2;
    c.steps = 2000;
    c.batch = 64;
    c.balance.mechanism = mech;
    c.balance.phi = Potential::neg_shannon();
    c.balance.alpha = alpha;
    c.balance.statistic = stat;
    c
}

fn terminal(r: &RunRecord) -> (f64, f64) {
    (r.terminal_max_vio().unwrap(), r.terminal_task_loss().unwrap())
}

fn trend(runs: &BTreeMap<(u64, &'static str), RunRecord>) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3 {
        let (phi_v, phi_l) = terminal(&runs[&(seed, "phi")]);
        let (st_v, st_l) = terminal(&runs[&(seed, "st_moe")]);
        let (none_v, none_l) = terminal(&runs[&(seed, "none")]);
        let rel = |l: f64| (l - none_l).abs() / none_l;
        ok &= phi_v < st_v && phi_v < none_v && st_v < none_v && rel(phi_l) <= 0.10 && rel(st_l) <= 0.10;
        lines.push(format!(
            "seed {seed}: maxvio {phi_v:.3}/{st_v:.3}/{none_v:.3}, loss Δ {:.1}%/{:.1}%",
            100.0 * rel(phi_l),
            100.0 * rel(st_l)
        ));
    }
    check(ok, lines.join("; "))
}

fn phi_ranking() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let plan = ExperimentPlan {
        base: desk_config(0, MechanismKind::Phi, 0.01, Statistic::Probability),
        axis: Some(SweepAxis::Phi(Potential::catalog())),
        repeats: 3,
        out: None,
    };
    let out = run_plan(&plan, dir.path(), 1).map_err(|e| e.to_string())?;
    let mut by_phi: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &out.runs {
        let RunStatus::Completed { csv } = &r.status else {
            return Err(format!("{} failed", r.spec.label));
        };
        let rows = read_run_csv(csv).map_err(|e| e.to_string())?;
        by_phi.entry(r.spec.label.clone()).or_default().push(terminal_metrics(&rows).unwrap().max_vio);
    }
    let mut ranked: Vec<(f64, String)> = by_phi.into_iter().map(|(k, v)| (v.iter().sum::<f64>() / v.len() as f64, k)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rank = ranked.iter().position(|(_, k)| k == "neg_shannon").unwrap() + 1;
    let top: Vec<String> = ranked.iter().take(3).map(|(v, k)| format!("{k} {v:.3}")).collect();
    check(rank <= 3, format!("neg_shannon rank {rank} of 9; top 3: {}", top.join(", ")))
}

fn ema_variants(runs: &BTreeMap<(u64, &'static str), RunRecord>) -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let prob = terminal(&runs[&(seed, "phi")]).1;
        let freq = terminal(&runs[&(seed, "freq")]).1;
        let rel = (prob - freq).abs() / prob.min(freq);
        ok &= rel <= 0.05;
        lines.push(format!("seed {seed}: {prob:.4} vs {freq:.4} ({:.1}%)", 100.0 * rel));
    }
    check(ok, lines.join("; "))
}

fn jensen() -> Outcome {
    let mut r = rng(9);
    let population: Vec<Vec<f64>> = (0..2000)
        .map(|_| {
            let z: Vec<f64> = (0..6).map(|e| 0.4 * e as f64 + 2.0 * (r.gen::<f64>() - 0.5)).collect();
            let mx = z.iter().cloned().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = ex.iter().sum();
            ex.iter().map(|v| v / s).collect()
        })
        .collect();
    let gaps = jensen_gap(&Potential::neg_shannon(), &population, &[1, 4, 16, 64], 1000, 3).map_err(|e| e.to_string())?;
    let mut ok = gaps.iter().all(|g| g.mean_gap > 0.0);
    let mut inversions = 0;
    for w in gaps.windows(2) {
        if w[1].mean_gap > w[0].mean_gap {
            inversions += 1;
            ok &= w[1].mean_gap - w[0].mean_gap <= 2.0 * (w[0].std_err.powi(2) + w[1].std_err.powi(2)).sqrt();
        }
    }
    ok &= inversions <= 1;
    let desc: Vec<String> = gaps.iter().map(|g| format!("B={} {:.4}", g.batch, g.mean_gap)).collect();
    check(ok, desc.join(", "))
}

fn metrics() -> Outcome {
    let e = |x: phibal::Error| x.to_string();
    let mv = max_vio(&[3.0, 1.0]).map_err(e)?;
    let g = gini(&[1.0, 0.0, 0.0, 0.0]).map_err(e)?;
    let mut ok = mv == 0.5 && g == 0.75;
    let mut r = rng(10);
    for _ in 0..200 {
        let n = r.gen_range(2..12);
        let loads: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..5.0)).collect();
        let mut shuffled = loads.clone();
        for i in (1..n).rev() {
            shuffled.swap(i, r.gen_range(0..=i));
        }
        let c = r.gen_range(0.01..1000.0);
        let scaled: Vec<f64> = loads.iter().map(|x| c * x).collect();
        let base = (max_vio(&loads).map_err(e)?, gini(&loads).map_err(e)?);
        for other in [&shuffled, &scaled] {
            let v = (max_vio(other).map_err(e)?, gini(other).map_err(e)?);
            ok &= (v.0 - base.0).abs() <= 1e-12 * base.0.abs().max(1.0) && (v.1 - base.1).abs() <= 1e-12;
        }
        let sel: Vec<Vec<usize>> = (0..40).map(|_| vec![r.gen_range(0..n)]).collect();
        let dom: Vec<usize> = (0..40).map(|_| r.gen_range(0..4)).collect();
        for row in routed_token_ratio(&sel, &dom, n, 4).map_err(e)?.into_iter().flatten() {
            ok &= (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        }
    }
    check(ok, format!("max_vio((3,1)) = {mv}, gini((1,0,0,0)) = {g}; 200 randomized invariance cases"))
}

fn budget() -> Outcome {
    let tpp = compute_token_budget(1.0).map_err(|e| e.to_string())?.tokens_per_param;
    let mut ok = (tpp - 27.27).abs() <= 0.05;
    let mut ratios = Vec::new();
    for c in [1.0, 1e12, 1e18] {
        let b = compute_token_budget(c).map_err(|e| e.to_string())?;
        // oracle: 0.1915·5.2232·C^(0.5095+0.4905−1) = 1.000243 exactly in exponent
        let ratio = b.params * b.tokens / c;
        ok &= (0.999..=1.002).contains(&ratio) && (ratio - 0.1915 * 5.2232).abs() < 1e-9;
        ratios.push(format!("{ratio:.6}"));
    }
    check(ok, format!("tpp(1) = {tpp:.4}; M·D/C = {}", ratios.join(", ")))
}

fn determinism() -> Outcome {
    let jobs = resolve_jobs(Some(4));
    if jobs != 1 {
        return Err(format!("deterministic mode resolved to {jobs} jobs"));
    }
    let mut base = desk_config(4, MechanismKind::Phi, 0.01, Statistic::Probability);
    base.steps = 150;
    base.eval_every = 50;
    let plan = ExperimentPlan {
        base,
        axis: Some(SweepAxis::Eta(vec![0.1, 0.9])),
        repeats: 2,
        out: None,
    };
    let read = |dir: &std::path::Path| -> BTreeMap<String, Vec<u8>> {
        fs::read_dir(dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".csv"))
            .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
            .collect()
    };
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_plan(&plan, a.path(), jobs).map_err(|e| e.to_string())?;
    run_plan(&plan, b.path(), jobs).map_err(|e| e.to_string())?;
    let (ca, cb) = (read(a.path()), read(b.path()));
    check(ca.len() == 4 && ca == cb, format!("{} CSVs compared byte for byte", ca.len()))
}

fn main() {
    std::env::set_var("PHIBAL_DETERMINISTIC", "1");
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        let (mark, detail) = match &out {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {mark} {name} ({secs:.1}s): {detail}");
        results.push((n, name, out, secs));
    };
    run(1, "uniform minimizer", &uniform_minimizer);
    run(2, "link/conjugate duality", &duality);
    run(3, "mirror-ascent step", &mirror_step);
    run(4, "gradient suite", &gradient_suite);
    run(5, "stop-gradient", &stop_gradient);

    let mut runs: BTreeMap<(u64, &'static str), RunRecord> = BTreeMap::new();
    let mut train_err = None;
    let mut train_all = |variants: &[(&'static str, MechanismKind, f64, Statistic)]| {
        let t = Instant::now();
        for seed in 0..3 {
            for &(key, mech, alpha, stat) in variants {
                match train(&desk_config(seed, mech, alpha, stat)) {
                    Ok(r) => {
                        runs.insert((seed, key), r);
                    }
                    Err(e) => train_err = Some(format!("{key} seed {seed}: {e}")),
                }
            }
        }
        t.elapsed().as_secs_f64()
    };
    let paired_secs = train_all(&[
        ("phi", MechanismKind::Phi, 0.01, Statistic::Probability),
        ("st_moe", MechanismKind::StMoe, 0.01, Statistic::Probability),
        ("none", MechanismKind::Phi, 0.0, Statistic::Probability),
    ]);
    train_all(&[("freq", MechanismKind::Phi, 0.01, Statistic::Frequency)]);
    let trained = || train_err.clone().map_or(Ok(()), Err);
    run(6, "balanced runs beat baselines", &|| {
        trained()?;
        let r = trend(&runs)?;
        check(paired_secs < 300.0, format!("{r}; 9 runs in {paired_secs:.0}s"))
    });
    run(7, "potential ranking", &phi_ranking);
    run(8, "frequency vs probability tracking", &|| {
        trained()?;
        ema_variants(&runs)
    });
    run(9, "Jensen gap", &jensen);
    run(10, "metric identities", &metrics);
    run(11, "token budget", &budget);
    run(12, "deterministic sweep", &determinism);

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
