//! Acceptance suite: one pass/fail line per criterion, non-zero exit on any
//! failure. `ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria
//! (`msv` and `d40` name the two pipeline runs).

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use iapf_core::filter::{run_bpf, run_psi_apf, smoothed_coordinate_means, FilterConfig, FilterOutput};
use iapf_core::hmm::{build_banded_linear_gaussian, build_linear_gaussian, HmmModel};
use iapf_core::iapf::{run_iapf, IapfConfig};
use iapf_core::inference::{run_pmmh, Estimator, MhConfig};
use iapf_core::learn::{approximate_psi_sequence, FitConfig};
use iapf_core::math::{categorical_sample, ess, log_mean_exp};
use iapf_core::oracle::{
    grid_asymptotic_variance_1d, grid_backward_psi_star_1d, grid_bpf_asymptotic_variance_1d, grid_log_likelihood_1d,
    kalman_log_likelihood, Grid1D,
};
use iapf_core::twist::{exact_psi_star_lgssm, integrand_log_ratio, TwistWorkspace, TwistedModel};
use iapf_core::{derive_seed, rng_from_seed, ModelFamily, PsiSequence};
use nalgebra::{dmatrix, dvector};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn banded(d: usize, len: usize, data_seed: u64) -> HmmModel {
    let space = build_banded_linear_gaussian(d, 0.42).unwrap();
    bound(&space, len, &mut rng_from_seed(data_seed)).1
}

fn scalar(alpha: f64, delta: f64, len: usize, data_seed: u64) -> HmmModel {
    let space = build_linear_gaussian(dvector![0.0], dmatrix![1.0], dmatrix![alpha], dmatrix![1.0], dmatrix![1.0], dmatrix![delta]).unwrap();
    bound(&space, len, &mut rng_from_seed(data_seed)).1
}

fn kalman(model: &HmmModel) -> f64 {
    kalman_log_likelihood(model).unwrap().log_likelihood
}

fn sd_of_ratios(log_z: &[f64], truth: f64) -> f64 {
    let ratios: Vec<f64> = log_z.iter().map(|l| (l - truth).exp()).collect();
    mean_sd(&ratios).1
}

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    for d in [1, 5] {
        let model = banded(d, 100, 100 + d as u64);
        let truth = kalman(&model);
        let star = exact_psi_star_lgssm(&model, true).map_err(|e| e.to_string())?;
        for seed in 0..50 {
            let out = run_psi_apf(&model, &star.psi, &FilterConfig::new(10, 0.5, seed)).map_err(|e| e.to_string())?;
            worst = worst.max((out.log_z() - truth).abs());
        }
    }
    ensure(worst < 1e-6, format!("max |log Z^N - log L| = {worst:.2e} over 2 x 50 seeds"))
}

fn criterion_2() -> Outcome {
    let mut rng = rng_from_seed(2);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let d = 1 + rng.random_range(0..3);
        let space = match i % 3 {
            0 => random_linear_gaussian(&mut rng, d),
            1 => random_univariate_sv(&mut rng),
            _ => random_multivariate_sv(&mut rng, d.max(2)),
        };
        let len = 1 + rng.random_range(0..6);
        let (path, model) = bound(&space, len, &mut rng);
        let psi = random_psi_sequence(&mut rng, model.dim_state(), len);
        let r = integrand_log_ratio(&model, &psi, &path).map_err(|e| e.to_string())?;
        worst = worst.max(r.abs());
    }
    ensure(worst < 1e-9, format!("max |log ratio| = {worst:.2e} over 1000 triples"))
}

fn criterion_3() -> Outcome {
    let model = scalar(0.9, 0.5, 20, 3);
    let grid = Grid1D::default_for(&model).map_err(|e| e.to_string())?;
    let tab = grid_backward_psi_star_1d(&model, &grid).map_err(|e| e.to_string())?;
    let exact = exact_psi_star_lgssm(&model, true).map_err(|e| e.to_string())?;
    let mut scratch = Vec::new();
    let mut worst: f64 = 0.0;
    for t in 0..20 {
        for (i, x) in tab.nodes.iter().enumerate() {
            let e = exact.psi.get(t).eval_log_slice(&[*x], &mut scratch);
            worst = worst.max((tab.log_psi[t][i] - e).exp_m1().abs());
        }
    }
    let truth = kalman(&model);
    let grid_z = grid_log_likelihood_1d(&model, &grid).map_err(|e| e.to_string())?;
    let tilde_exact = (exact.log_psi_tilde_0 - truth).abs().max((exact.log_psi_tilde_0 - grid_z).abs());
    let tilde_grid = (tab.log_psi_tilde_0 - truth).abs().max((tab.log_psi_tilde_0 - grid_z).abs());
    ensure(
        worst < 1e-6 && tilde_exact < 1e-8 && tilde_grid < 1e-8,
        format!("max relative error {worst:.2e}; psi_tilde_0 gaps {tilde_exact:.2e} (exact), {tilde_grid:.2e} (grid)"),
    )
}

fn criterion_4() -> Outcome {
    let model = scalar(0.9, 1.0, 10, 4);
    let truth = kalman(&model);
    let ratios: Vec<f64> = (0..10_000)
        .map(|r| run_bpf(&model, &FilterConfig::new(100, 0.5, derive_seed(4, r))).map(|o| (o.log_z() - truth).exp()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (mean, sd) = mean_sd(&ratios);
    let se = sd / (ratios.len() as f64).sqrt();
    let z = (mean - 1.0) / se;
    ensure(z.abs() <= 4.0, format!("mean(Z^N/Z) = {mean:.5}, SE {se:.5}, z = {z:.2}"))
}

fn criteria_5_6() -> (Outcome, Outcome) {
    let model = banded(5, 100, 5);
    let truth = kalman(&model);
    let mut iapf_z = Vec::new();
    let mut iapf_r = Vec::new();
    let mut iapf_n = Vec::new();
    let mut bpf_z = Vec::new();
    let mut bpf_r = Vec::new();
    for r in 0..100 {
        let cfg = IapfConfig { n0: 1000, k: 5, tau: 0.5, kappa: 0.5, seed: derive_seed(5, r), ..Default::default() };
        match run_iapf(&model, &cfg) {
            Ok(res) => {
                iapf_z.push(res.log_z);
                iapf_r.push(res.output.resampling_count() as f64);
                iapf_n.push(res.final_particles() as f64);
            }
            Err(e) => return (Err(format!("iAPF replicate {r}: {e}")), Err("not run".into())),
        }
        match run_bpf(&model, &FilterConfig::new(10_000, 0.5, derive_seed(6, r))) {
            Ok(out) => {
                bpf_z.push(out.log_z());
                bpf_r.push(out.resampling_count() as f64);
            }
            Err(e) => return (Err(format!("BPF replicate {r}: {e}")), Err("not run".into())),
        }
    }
    let (sd_i, sd_b) = (sd_of_ratios(&iapf_z, truth), sd_of_ratios(&bpf_z, truth));
    let c5 = ensure(
        sd_i <= 0.2 && sd_b >= 0.3 && sd_i < 0.5 * sd_b,
        format!("sd(Z^/Z): iAPF {sd_i:.3}, BPF {sd_b:.3}"),
    );
    let (mr_i, mr_b) = (mean_sd(&iapf_r).0, mean_sd(&bpf_r).0);
    let mean_n = mean_sd(&iapf_n).0;
    let c6 = ensure(
        mr_i <= 15.0 && mr_b >= 90.0 && mean_n <= 2000.0,
        format!("mean resampling count: iAPF {mr_i:.2}, BPF {mr_b:.2} of 99; iAPF mean final N {mean_n:.0}"),
    );
    (c5, c6)
}

fn criterion_7() -> Outcome {
    let model = scalar(0.9, 1.0, 5, 7);
    let grid = Grid1D::default_for(&model).map_err(|e| e.to_string())?;
    let star = exact_psi_star_lgssm(&model, true).map_err(|e| e.to_string())?;
    let v_star = grid_asymptotic_variance_1d(&model, &star.psi, &grid).map_err(|e| e.to_string())?;
    let constant = PsiSequence::constant(5, 1);
    let v_const = grid_asymptotic_variance_1d(&model, &constant, &grid).map_err(|e| e.to_string())?;
    let v_bpf = grid_bpf_asymptotic_variance_1d(&model, &grid).map_err(|e| e.to_string())?;
    let truth = kalman(&model);
    let n = 10_000;
    let ratios: Vec<f64> = (0..10_000)
        .map(|r| run_bpf(&model, &FilterConfig::new(n, 1.0, derive_seed(7, r))).map(|o| (o.log_z() - truth).exp()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let sd = mean_sd(&ratios).1;
    let scaled = n as f64 * sd * sd;
    let rel = (scaled / v_const - 1.0).abs();
    ensure(
        v_star.abs() < 1e-8 && (v_const - v_bpf).abs() < 1e-8 && rel <= 0.2,
        format!(
            "sigma2(psi*) = {v_star:.1e}; sigma2(const) = {v_const:.6}, BPF formula {v_bpf:.6}; N Var = {scaled:.4} ({:.1}% off)",
            100.0 * rel
        ),
    )
}

fn criterion_8() -> Outcome {
    let model = scalar(0.9, 0.25, 50, 8);
    let obs = model.observations().clone();
    let family = ModelFamily::ScalarLinearGaussian { delta: 0.25 };
    let builder = |theta: &[f64]| family.build(theta).and_then(|s| s.bind(obs.clone()));
    let priors = family.default_priors();
    let run = |seed: u64| -> Result<(f64, f64, f64, f64, f64, f64), String> {
        let mut cfg = MhConfig { chain_length: 20_000, proposal_sd: vec![0.1f64.sqrt()], estimator: Estimator::Kalman, seed };
        let exact = run_pmmh(builder, &priors, &["alpha"], &[1.0], &cfg).map_err(|e| e.to_string())?.summary();
        cfg.estimator = Estimator::Iapf(IapfConfig { n0: 50, k: 3, ..Default::default() });
        let noisy = run_pmmh(builder, &priors, &["alpha"], &[1.0], &cfg).map_err(|e| e.to_string())?.summary();
        let get = |s: &iapf_core::inference::ChainSummary| -> Result<(f64, f64, f64), String> {
            Ok((s.posterior_means[0], s.mcse[0].ok_or("no MCSE")?, s.iact[0].ok_or("no IACT")?))
        };
        let (m0, e0, i0) = get(&exact)?;
        let (m1, e1, i1) = get(&noisy)?;
        Ok((m0, e0, i0, m1, e1, i1))
    };
    let judge = |(m0, e0, i0, m1, e1, i1): (f64, f64, f64, f64, f64, f64)| {
        let bound = 3.0 * (e0 * e0 + e1 * e1).sqrt();
        let ok = (m1 - m0).abs() <= bound && i1 <= 1.5 * i0;
        let detail = format!(
            "posterior mean Kalman {m0:.4} vs iAPF {m1:.4} (|diff| {:.4}, bound {bound:.4}); IACT {i0:.2} vs {i1:.2} (ratio {:.2})",
            (m1 - m0).abs(),
            i1 / i0
        );
        (ok, detail)
    };
    let (ok, detail) = judge(run(8)?);
    if ok {
        return Ok(detail);
    }
    let (ok2, detail2) = judge(run(derive_seed(8, 1))?);
    ensure(ok2, format!("first run failed ({detail}); rerun: {detail2}"))
}

fn criterion_9() -> Outcome {
    let model = scalar(0.9, 1.0, 50, 9);
    let smoothed: Vec<f64> = kalman_log_likelihood(&model).unwrap().smoothed_means.iter().map(|m| m[0]).collect();
    let learned = run_iapf(&model, &IapfConfig { n0: 1000, seed: 9, ..Default::default() }).map_err(|e| e.to_string())?;
    let psi = learned.psi;
    let estimate = |seed: u64| -> Result<Vec<f64>, String> {
        let mut cfg = FilterConfig::new(1000, 0.5, seed);
        cfg.record_ancestry = true;
        let out = run_psi_apf(&model, &psi, &cfg).map_err(|e| e.to_string())?;
        smoothed_coordinate_means(&out, 0).map_err(|e| e.to_string())
    };
    let single = estimate(derive_seed(9, 0))?;
    let reps: Vec<Vec<f64>> = (1..=100).map(|r| estimate(derive_seed(9, r))).collect::<Result<_, _>>()?;
    let mut worst: f64 = 0.0;
    for t in 0..50 {
        let col: Vec<f64> = reps.iter().map(|r| r[t]).collect();
        let se = mean_sd(&col).1;
        worst = worst.max((single[t] - smoothed[t]).abs() / se);
    }
    ensure(worst <= 3.0, format!("max |pi^N(x_t) - smoother| / MC SE = {worst:.2} over 50 steps"))
}

/// Resampling at every step on the twisted model's primitives.
fn reference_every_step(twisted: &TwistedModel<'_>, n: usize, seed: u64) -> (Vec<Vec<f64>>, f64) {
    let d = twisted.dim();
    let mut rng = rng_from_seed(seed);
    let mut ws = TwistWorkspace::new(d);
    let mut xs = vec![0.0; n * d];
    let mut w = vec![0.0; n];
    for i in 0..n {
        twisted.sample_initial(&mut rng, &mut xs[i * d..(i + 1) * d]);
        w[i] = twisted.log_g_twisted(0, &xs[i * d..(i + 1) * d], &mut ws);
    }
    let mut path = vec![xs.clone()];
    let mut log_z = 0.0;
    for t in 1..twisted.len() {
        log_z += log_mean_exp(&w);
        let idx = categorical_sample(&mut rng, &w, n).unwrap();
        let mut next = vec![0.0; n * d];
        for (i, &a) in idx.iter().enumerate() {
            let x = &mut next[i * d..(i + 1) * d];
            twisted.sample_transition(t, &xs[a * d..(a + 1) * d], &mut ws, &mut rng, x);
            w[i] = twisted.log_g_twisted(t, x, &mut ws);
        }
        xs = next;
        path.push(xs.clone());
    }
    log_z += log_mean_exp(&w);
    (path, log_z)
}

/// κ-adaptive bootstrap filter on the untwisted model's primitives.
fn reference_bootstrap(model: &HmmModel, n: usize, kappa: f64, seed: u64) -> (Vec<Vec<f64>>, f64) {
    let d = model.dim_state();
    let mut rng = rng_from_seed(seed);
    let mut xs = vec![0.0; n * d];
    let mut w = vec![0.0; n];
    for i in 0..n {
        model.initial().sample_into(&mut rng, &mut xs[i * d..(i + 1) * d]);
        w[i] = model.log_g(0, &xs[i * d..(i + 1) * d]);
    }
    let mut path = vec![xs.clone()];
    let mut log_z = 0.0;
    for t in 1..model.len() {
        let mut next = vec![0.0; n * d];
        if ess(&w).unwrap() <= kappa * n as f64 {
            log_z += log_mean_exp(&w);
            let idx = categorical_sample(&mut rng, &w, n).unwrap();
            for (i, &a) in idx.iter().enumerate() {
                let x = &mut next[i * d..(i + 1) * d];
                model.transition().sample_into(&xs[a * d..(a + 1) * d], &mut rng, x);
                w[i] = model.log_g(t, x);
            }
        } else {
            for i in 0..n {
                let x = &mut next[i * d..(i + 1) * d];
                model.transition().sample_into(&xs[i * d..(i + 1) * d], &mut rng, x);
                w[i] += model.log_g(t, x);
            }
        }
        xs = next;
        path.push(xs.clone());
    }
    log_z += log_mean_exp(&w);
    (path, log_z)
}

fn same_run(out: &FilterOutput, path: &[Vec<f64>], log_z: f64) -> bool {
    out.log_z().to_bits() == log_z.to_bits() && path.iter().enumerate().all(|(t, xs)| out.particles_at(t) == &xs[..])
}

fn criterion_10() -> Outcome {
    let mut rng = rng_from_seed(10);
    let space = random_linear_gaussian(&mut rng, 2);
    let (_, model) = bound(&space, 30, &mut rng);
    let mut cfg = FilterConfig::new(200, 1.0, 10);
    cfg.record_ancestry = true;
    let pilot = run_bpf(&model, &cfg).map_err(|e| e.to_string())?;
    let psi = approximate_psi_sequence(&model, &pilot, &FitConfig::default()).map_err(|e| e.to_string())?;

    let mut worst: f64 = 0.0;
    for s in 0..20u64 {
        let factors: Vec<f64> = (0..30).map(|_| 20.0 * (rng.random::<f64>() - 0.5)).collect();
        let c = FilterConfig::new(200, 0.5, derive_seed(10, s));
        let a = run_psi_apf(&model, &psi, &c).map_err(|e| e.to_string())?.log_z();
        let b = run_psi_apf(&model, &psi.rescaled(&factors), &c).map_err(|e| e.to_string())?.log_z();
        worst = worst.max((a - b).abs());
    }

    let twisted = TwistedModel::new(&model, &psi).map_err(|e| e.to_string())?;
    let mut every = true;
    for s in 0..5u64 {
        let out = run_psi_apf(&model, &psi, &FilterConfig::new(100, 1.0, s)).map_err(|e| e.to_string())?;
        let (path, lz) = reference_every_step(&twisted, 100, s);
        every &= same_run(&out, &path, lz);
    }

    let constant = PsiSequence::constant(30, 2);
    let mut boot = true;
    for (s, kappa) in [(0u64, 0.5), (1, 1.0), (2, 0.0), (3, 0.8)] {
        let c = FilterConfig::new(100, kappa, s);
        let a = run_bpf(&model, &c).map_err(|e| e.to_string())?;
        let b = run_psi_apf(&model, &constant, &c).map_err(|e| e.to_string())?;
        let (path, lz) = reference_bootstrap(&model, 100, kappa, s);
        boot &= a.log_z().to_bits() == b.log_z().to_bits()
            && (0..30).all(|t| a.particles_at(t) == b.particles_at(t) && a.log_weights_at(t) == b.log_weights_at(t))
            && same_run(&a, &path, lz);
    }
    ensure(
        worst < 1e-10 && every && boot,
        format!("rescaling max |dlog Z| = {worst:.1e}; kappa=1 matches reference: {every}; BPF = constant-psi APF = reference: {boot}"),
    )
}

fn smoke_d40() -> Outcome {
    let model = banded(40, 100, 40);
    let truth = kalman(&model);
    let res = run_iapf(&model, &IapfConfig { n0: 1000, k: 5, seed: 40, ..Default::default() }).map_err(|e| e.to_string())?;
    ensure(
        res.log_z.is_finite(),
        format!(
            "d=40: log Z^ - log Z = {:.3}, {} iterations, final N {}, {} resamplings",
            res.log_z - truth,
            res.trace.records.len(),
            res.final_particles(),
            res.output.resampling_count()
        ),
    )
}

fn pipeline_msv() -> Outcome {
    let family = ModelFamily::MultivariateSv { dim: 20 };
    let mut theta = family.default_theta0(None);
    theta[..20].iter_mut().for_each(|m| *m = -0.5);
    let space = family.build(&theta).map_err(|e| e.to_string())?;
    let (_, obs) = space.simulate(100, &mut rng_from_seed(20));
    let model = space.bind(obs.clone()).map_err(|e| e.to_string())?;
    let iapf = IapfConfig { n0: 100, k: 3, tau: 1.5, n_max: 3200, l_max: 40, seed: 20, ..Default::default() };
    let single = run_iapf(&model, &iapf).map_err(|e| e.to_string())?;
    let bpf = run_bpf(&model, &FilterConfig::new(1000, 0.5, 20)).map_err(|e| e.to_string())?;

    let builder = |t: &[f64]| family.build(t).and_then(|s| s.bind(obs.clone()));
    let priors = family.default_priors();
    let names = family.param_names();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let theta0 = family.default_theta0(Some(&obs));
    let cfg = MhConfig { chain_length: 3, proposal_sd: family.default_proposal_sd(), estimator: Estimator::Iapf(iapf), seed: 21 };
    let short = run_pmmh(builder, &priors, &names, &theta0, &cfg).map_err(|e| e.to_string())?.summary();
    let cfg = MhConfig { chain_length: 1000, estimator: Estimator::Bpf { n_particles: 200, kappa: 0.5 }, seed: 22, ..cfg };
    let long = run_pmmh(builder, &priors, &names, &theta0, &cfg).map_err(|e| e.to_string())?.summary();

    let finite = |s: &iapf_core::inference::ChainSummary| {
        s.posterior_means.iter().chain(&s.acceptance_rates).all(|v| v.is_finite())
            && s.iact.iter().chain(&s.mcse).flatten().all(|v| v.is_finite())
    };
    let with_iact = long.iact.iter().flatten().count();
    ensure(
        single.log_z.is_finite() && bpf.log_z().is_finite() && finite(&short) && finite(&long) && with_iact > 0,
        format!(
            "d=20 T=100: iAPF log Z^ {:.2} ({} iterations, final N {}), BPF {:.2}; iAPF chain {} steps, BPF chain {} steps, {with_iact} of 79 IACTs",
            single.log_z,
            single.trace.records.len(),
            single.final_particles(),
            bpf.log_z(),
            short.chain_length,
            long.chain_length
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<String>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |key: &str| only.as_ref().is_none_or(|o| o.iter().any(|k| k == key));
    let mut failures = 0;
    let mut report = |label: &str, outcome: Outcome, started: Instant| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {label}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("criterion {label}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    };
    let singles: [(&str, fn() -> Outcome); 8] = [
        ("1", criterion_1),
        ("2", criterion_2),
        ("3", criterion_3),
        ("4", criterion_4),
        ("7", criterion_7),
        ("8", criterion_8),
        ("9", criterion_9),
        ("10", criterion_10),
    ];
    for (key, f) in singles.iter().take(4) {
        if wanted(key) {
            let t = Instant::now();
            report(key, f(), t);
        }
    }
    if wanted("5") || wanted("6") {
        let t = Instant::now();
        let (c5, c6) = criteria_5_6();
        report("5", c5, t);
        report("6", c6, t);
    }
    for (key, f) in singles.iter().skip(4) {
        if wanted(key) {
            let t = Instant::now();
            report(key, f(), t);
        }
    }
    if wanted("d40") {
        let t = Instant::now();
        report("5 (d=40 smoke run)", smoke_d40(), t);
    }
    if wanted("msv") {
        let t = Instant::now();
        report("MSV pipeline", pipeline_msv(), t);
    }
    if failures > 0 {
        println!("{failures} acceptance check(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
