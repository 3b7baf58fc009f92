//! Subcommand implementations.

use std::path::Path;
use std::time::Instant;

use iapf_core::filter::smoothed_coordinate_means;
use iapf_core::hmm::{build_banded_linear_gaussian, mean_corrected_returns};
use iapf_core::iapf::{IapfError, IapfTrace};
use iapf_core::{
    derive_seed, kalman_log_likelihood, rng_from_seed, run_bpf, run_iapf, run_pmmh, FilterConfig, FilterOutput, HmmModel,
    MhConfig, Observations,
};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::output::{finish, json_lines, mean_sd, write_file};
use crate::spec::{
    bind, BenchDimSpec, BenchParamSpec, EstimatorSpec, FilterSpec, IapfSpec, PmmhSpec, ProfileSpec, SmoothSpec,
};
use crate::{CliError, Run};

/// One likelihood estimate.
struct Estimate {
    log_z: f64,
    resampling_count: Option<usize>,
    final_n: Option<usize>,
    trace: Option<IapfTrace>,
    output: Option<FilterOutput>,
    wall_time_ms: f64,
}

fn estimate(est: &EstimatorSpec, model: &HmmModel, seed: u64) -> Result<Estimate, String> {
    let started = Instant::now();
    let mut e = match est {
        EstimatorSpec::Bpf(p) => {
            let out = run_bpf(model, &FilterConfig::new(p.n, p.kappa, seed)).map_err(|e| e.to_string())?;
            Estimate {
                log_z: out.log_z(),
                resampling_count: Some(out.resampling_count()),
                final_n: None,
                trace: None,
                output: Some(out),
                wall_time_ms: 0.0,
            }
        }
        EstimatorSpec::Iapf(p) => {
            let res = run_iapf(model, &p.config(seed)).map_err(|e| match e {
                IapfError::IterationLimit(t) | IapfError::ParticleLimit(t) => {
                    format!("iAPF stopped by its {:?} after {} iterations", t.termination, t.records.len())
                }
                other => other.to_string(),
            })?;
            Estimate {
                log_z: res.log_z,
                resampling_count: Some(res.output.resampling_count()),
                final_n: Some(res.final_particles()),
                trace: Some(res.trace),
                output: Some(res.output),
                wall_time_ms: 0.0,
            }
        }
        EstimatorSpec::Kalman => Estimate {
            log_z: kalman_log_likelihood(model).map_err(|e| e.to_string())?.log_likelihood,
            resampling_count: None,
            final_n: None,
            trace: None,
            output: None,
            wall_time_ms: 0.0,
        },
    };
    e.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(e)
}

fn skip<T>(v: &Option<T>) -> bool {
    v.is_none()
}

#[derive(Clone, Debug, Default, Serialize)]
struct GroupKey {
    #[serde(skip_serializing_if = "skip")]
    dim: Option<usize>,
    #[serde(skip_serializing_if = "skip")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "skip")]
    point: Option<usize>,
    estimator: String,
}

#[derive(Clone, Debug, Serialize)]
struct ReplicateRecord {
    #[serde(flatten)]
    key: GroupKey,
    replicate: usize,
    seed: u64,
    log_z: Option<f64>,
    #[serde(skip_serializing_if = "skip")]
    log_z_true: Option<f64>,
    #[serde(skip_serializing_if = "skip")]
    resampling_count: Option<usize>,
    #[serde(skip_serializing_if = "skip")]
    final_n: Option<usize>,
    #[serde(skip_serializing_if = "skip")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "skip")]
    error: Option<String>,
    #[serde(skip_serializing_if = "skip")]
    wall_time_ms: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
struct GroupSummary {
    #[serde(flatten)]
    key: GroupKey,
    replicates: usize,
    failures: usize,
    mean_log_z: Option<f64>,
    sd_log_z: Option<f64>,
    /// `log Z` from the Kalman filter.
    #[serde(skip_serializing_if = "skip")]
    log_z_true: Option<f64>,
    /// Mean and standard deviation of `Z^/Z`.
    #[serde(skip_serializing_if = "skip")]
    mean_ratio: Option<f64>,
    #[serde(skip_serializing_if = "skip")]
    sd_ratio: Option<f64>,
    #[serde(skip_serializing_if = "skip")]
    mean_resampling_count: Option<f64>,
    #[serde(skip_serializing_if = "skip")]
    mean_final_n: Option<f64>,
}

/// Recomputes a group summary from its records.
fn summarize(key: GroupKey, log_z_true: Option<f64>, records: &[&ReplicateRecord]) -> GroupSummary {
    let ok: Vec<&ReplicateRecord> = records.iter().copied().filter(|r| r.log_z.is_some()).collect();
    let log_z: Vec<f64> = ok.iter().filter_map(|r| r.log_z).collect();
    let stats = |xs: &[f64]| (!xs.is_empty()).then(|| mean_sd(xs));
    let lz = stats(&log_z);
    let ratios: Option<Vec<f64>> = log_z_true.map(|t| log_z.iter().map(|l| (l - t).exp()).collect());
    let ratio = ratios.as_deref().and_then(stats);
    let counts: Vec<f64> = ok.iter().filter_map(|r| r.resampling_count.map(|c| c as f64)).collect();
    let finals: Vec<f64> = ok.iter().filter_map(|r| r.final_n.map(|c| c as f64)).collect();
    GroupSummary {
        key,
        replicates: records.len(),
        failures: records.len() - ok.len(),
        mean_log_z: lz.map(|s| s.0),
        sd_log_z: lz.map(|s| s.1),
        log_z_true,
        mean_ratio: ratio.map(|s| s.0),
        sd_ratio: ratio.map(|s| s.1),
        mean_resampling_count: stats(&counts).map(|s| s.0),
        mean_final_n: stats(&finals).map(|s| s.0),
    }
}

struct Group<'a> {
    key: GroupKey,
    model: &'a HmmModel,
    estimator: &'a EstimatorSpec,
    log_z_true: Option<f64>,
}

struct GroupRun {
    records: Vec<ReplicateRecord>,
    summaries: Vec<GroupSummary>,
    traces: Vec<Option<IapfTrace>>,
    outputs: Vec<Option<FilterOutput>>,
}

/// Runs every replicate of every group on the pool; results come back in
/// (group, replicate) order whatever the scheduling.
fn run_groups(run: &Run, groups: &[Group<'_>], keep_outputs: bool) -> GroupRun {
    let tasks: Vec<(usize, usize)> = (0..groups.len()).flat_map(|g| (0..run.replicates).map(move |r| (g, r))).collect();
    let results: Vec<(ReplicateRecord, Option<IapfTrace>, Option<FilterOutput>)> = run.pool.install(|| {
        tasks
            .par_iter()
            .map(|&(g, r)| {
                let group = &groups[g];
                let seed = derive_seed(run.seed, r as u64);
                let mut record = ReplicateRecord {
                    key: group.key.clone(),
                    replicate: r,
                    seed,
                    log_z: None,
                    log_z_true: group.log_z_true,
                    resampling_count: None,
                    final_n: None,
                    iterations: None,
                    error: None,
                    wall_time_ms: None,
                };
                match estimate(group.estimator, group.model, seed) {
                    Ok(e) => {
                        record.log_z = Some(e.log_z);
                        record.resampling_count = e.resampling_count;
                        record.final_n = e.final_n;
                        record.iterations = e.trace.as_ref().map(|t| t.records.len());
                        record.wall_time_ms = run.timing.then_some(e.wall_time_ms);
                        (record, e.trace, if keep_outputs { e.output } else { None })
                    }
                    Err(msg) => {
                        log::warn!("{} replicate {r}: {msg}", group.key.estimator);
                        record.error = Some(msg);
                        (record, None, None)
                    }
                }
            })
            .collect()
    });
    let mut records = Vec::with_capacity(results.len());
    let mut traces = Vec::with_capacity(results.len());
    let mut outputs = Vec::with_capacity(results.len());
    for (rec, trace, out) in results {
        records.push(rec);
        traces.push(trace);
        outputs.push(out);
    }
    let summaries = groups
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let rows: Vec<&ReplicateRecord> = records[g * run.replicates..(g + 1) * run.replicates].iter().collect();
            summarize(group.key.clone(), group.log_z_true, &rows)
        })
        .collect();
    GroupRun { records, summaries, traces, outputs }
}

fn failures(records: &[ReplicateRecord]) -> Result<(), CliError> {
    let n = records.iter().filter(|r| r.error.is_some()).count();
    if n > 0 {
        return Err(CliError::Numerical(format!("{n} of {} runs failed; see the records", records.len())));
    }
    Ok(())
}

fn kalman_truth(model: &HmmModel) -> Option<f64> {
    model.linear_gaussian().and_then(|_| kalman_log_likelihood(model).ok()).map(|k| k.log_likelihood)
}

#[derive(Serialize)]
struct Summary<'a, C: Serialize> {
    command: &'static str,
    config: &'a C,
    seed: u64,
    replicates: usize,
    groups: Vec<GroupSummary>,
    #[serde(skip_serializing_if = "skip")]
    wall_time_ms: Option<f64>,
}

fn elapsed(run: &Run, started: Instant) -> Option<f64> {
    run.timing.then(|| started.elapsed().as_secs_f64() * 1e3)
}

pub fn filter(run: &Run, spec: FilterSpec) -> Result<(), CliError> {
    spec.validate()?;
    let started = Instant::now();
    let model = bind(&spec.model, &spec.data)?;
    let group = Group {
        key: GroupKey { estimator: spec.estimator.label(), ..Default::default() },
        model: &model,
        estimator: &spec.estimator,
        log_z_true: kalman_truth(&model),
    };
    let res = run_groups(run, &[group], false);
    print!("{}", json_lines(&res.records));
    let summary = Summary {
        command: "filter",
        config: &spec,
        seed: run.seed,
        replicates: run.replicates,
        groups: res.summaries,
        wall_time_ms: elapsed(run, started),
    };
    finish(run, &res.records, &summary)?;
    failures(&res.records)
}

#[derive(Serialize)]
struct TraceLine {
    replicate: usize,
    l: usize,
    #[serde(rename = "N")]
    n_particles: usize,
    log_z: f64,
    resampling_count: usize,
    fitted_next: bool,
    retried: bool,
    #[serde(skip_serializing_if = "skip")]
    wall_time_ms: Option<f64>,
}

pub fn iapf(run: &Run, spec: IapfSpec) -> Result<(), CliError> {
    spec.validate()?;
    let started = Instant::now();
    let model = bind(&spec.model, &spec.data)?;
    let estimator = EstimatorSpec::Iapf(spec.iapf.clone());
    let group = Group {
        key: GroupKey { estimator: estimator.label(), ..Default::default() },
        model: &model,
        estimator: &estimator,
        log_z_true: kalman_truth(&model),
    };
    let res = run_groups(run, &[group], false);
    let lines: Vec<TraceLine> = res
        .traces
        .iter()
        .enumerate()
        .flat_map(|(r, t)| {
            t.iter().flat_map(move |t| {
                t.records.iter().map(move |rec| TraceLine {
                    replicate: r,
                    l: rec.l,
                    n_particles: rec.n_particles,
                    log_z: rec.log_z,
                    resampling_count: rec.resampling_count,
                    fitted_next: rec.fitted_next,
                    retried: rec.retried,
                    wall_time_ms: run.timing.then_some(rec.wall_time_ms),
                })
            })
        })
        .collect();
    write_file(run, "trace.jsonl", &json_lines(&lines))?;
    let summary = Summary {
        command: "iapf",
        config: &spec,
        seed: run.seed,
        replicates: run.replicates,
        groups: res.summaries,
        wall_time_ms: elapsed(run, started),
    };
    finish(run, &res.records, &summary)?;
    failures(&res.records)
}

fn banded_model(dim: usize, alpha: f64, length: usize, data_seed: u64) -> Result<HmmModel, CliError> {
    let space = build_banded_linear_gaussian(dim, alpha).map_err(|e| CliError::Config(e.to_string()))?;
    let (_, obs) = space.simulate(length, &mut rng_from_seed(data_seed));
    space.bind(obs).map_err(|e| CliError::Config(e.to_string()))
}

pub fn bench_dim(run: &Run, spec: BenchDimSpec) -> Result<(), CliError> {
    spec.validate()?;
    let started = Instant::now();
    let models: Vec<HmmModel> =
        spec.dims.iter().map(|&d| banded_model(d, spec.alpha, spec.length, spec.data_seed)).collect::<Result<_, _>>()?;
    let truths: Vec<Option<f64>> = models.iter().map(kalman_truth).collect();
    let groups: Vec<Group<'_>> = models
        .iter()
        .zip(&spec.dims)
        .zip(&truths)
        .flat_map(|((model, &dim), &truth)| {
            spec.estimators.iter().map(move |est| Group {
                key: GroupKey { dim: Some(dim), estimator: est.label(), ..Default::default() },
                model,
                estimator: est,
                log_z_true: truth,
            })
        })
        .collect();
    let res = run_groups(run, &groups, false);
    let summary = Summary {
        command: "bench-dim",
        config: &spec,
        seed: run.seed,
        replicates: run.replicates,
        groups: res.summaries,
        wall_time_ms: elapsed(run, started),
    };
    finish(run, &res.records, &summary)?;
    failures(&res.records)
}

pub fn bench_param(run: &Run, spec: BenchParamSpec) -> Result<(), CliError> {
    spec.validate()?;
    let started = Instant::now();
    let models: Vec<HmmModel> =
        spec.alphas.iter().map(|&a| banded_model(spec.dim, a, spec.length, spec.data_seed)).collect::<Result<_, _>>()?;
    let truths: Vec<Option<f64>> = models.iter().map(kalman_truth).collect();
    let groups: Vec<Group<'_>> = models
        .iter()
        .zip(&spec.alphas)
        .zip(&truths)
        .flat_map(|((model, &alpha), &truth)| {
            spec.estimators.iter().map(move |est| Group {
                key: GroupKey { alpha: Some(alpha), estimator: est.label(), ..Default::default() },
                model,
                estimator: est,
                log_z_true: truth,
            })
        })
        .collect();
    let res = run_groups(run, &groups, false);
    let summary = Summary {
        command: "bench-param",
        config: &spec,
        seed: run.seed,
        replicates: run.replicates,
        groups: res.summaries,
        wall_time_ms: elapsed(run, started),
    };
    finish(run, &res.records, &summary)?;
    failures(&res.records)
}

pub fn profile(run: &Run, spec: ProfileSpec) -> Result<(), CliError> {
    spec.validate()?;
    let started = Instant::now();
    let family = spec.model.family().expect("validated family model");
    let data = spec.data.observations(&spec.model.space()?)?;
    let models: Vec<HmmModel> = spec
        .points
        .iter()
        .map(|p| family.build(p).and_then(|s| s.bind(data.clone())).map_err(|e| CliError::Config(e.to_string())))
        .collect::<Result<_, _>>()?;
    let groups: Vec<Group<'_>> = models
        .iter()
        .enumerate()
        .flat_map(|(i, model)| {
            spec.estimators.iter().map(move |est| Group {
                key: GroupKey { point: Some(i), estimator: est.label(), ..Default::default() },
                model,
                estimator: est,
                log_z_true: None,
            })
        })
        .collect();
    let res = run_groups(run, &groups, false);
    let summary = Summary {
        command: "profile",
        config: &spec,
        seed: run.seed,
        replicates: run.replicates,
        groups: res.summaries,
        wall_time_ms: elapsed(run, started),
    };
    finish(run, &res.records, &summary)?;
    failures(&res.records)
}

#[derive(Serialize)]
struct SmoothRecord {
    replicate: usize,
    seed: u64,
    log_z: Option<f64>,
    means: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "skip")]
    error: Option<String>,
}

#[derive(Serialize)]
struct SmoothStep {
    t: usize,
    mean: f64,
    /// Across-replicate standard deviation of the estimate.
    mc_sd: f64,
    #[serde(skip_serializing_if = "skip")]
    kalman: Option<f64>,
    /// `(mean − kalman) / mc_sd` for the first replicate.
    #[serde(skip_serializing_if = "skip")]
    z_first: Option<f64>,
}

#[derive(Serialize)]
struct SmoothSummary<'a> {
    command: &'static str,
    config: &'a SmoothSpec,
    seed: u64,
    replicates: usize,
    failures: usize,
    steps: Vec<SmoothStep>,
    #[serde(skip_serializing_if = "skip")]
    max_abs_z_first: Option<f64>,
    #[serde(skip_serializing_if = "skip")]
    wall_time_ms: Option<f64>,
}

pub fn smooth(run: &Run, spec: SmoothSpec) -> Result<(), CliError> {
    spec.validate()?;
    let started = Instant::now();
    let model = bind(&spec.model, &spec.data)?;
    if spec.coordinate >= model.dim_state() {
        return Err(CliError::Config(format!("coordinate {} out of range for dimension {}", spec.coordinate, model.dim_state())));
    }
    let group = Group {
        key: GroupKey { estimator: spec.estimator.label(), ..Default::default() },
        model: &model,
        estimator: &spec.estimator,
        log_z_true: None,
    };
    let res = run_groups(run, &[group], true);
    let records: Vec<SmoothRecord> = res
        .records
        .iter()
        .zip(&res.outputs)
        .map(|(rec, out)| {
            let means = out.as_ref().map(|o| smoothed_coordinate_means(o, spec.coordinate));
            let (means, error) = match means {
                Some(Ok(m)) => (Some(m), rec.error.clone()),
                Some(Err(e)) => (None, Some(e.to_string())),
                None => (None, rec.error.clone()),
            };
            SmoothRecord { replicate: rec.replicate, seed: rec.seed, log_z: rec.log_z, means, error }
        })
        .collect();
    let ok: Vec<&Vec<f64>> = records.iter().filter_map(|r| r.means.as_ref()).collect();
    let kalman: Option<Vec<f64>> = model
        .linear_gaussian()
        .and_then(|_| kalman_log_likelihood(&model).ok())
        .map(|k| k.smoothed_means.iter().map(|m| m[spec.coordinate]).collect());
    let first = records.first().and_then(|r| r.means.as_ref());
    let steps: Vec<SmoothStep> = if ok.is_empty() {
        Vec::new()
    } else {
        (0..model.len())
            .map(|t| {
                let col: Vec<f64> = ok.iter().map(|m| m[t]).collect();
                let (mean, mc_sd) = mean_sd(&col);
                let k = kalman.as_ref().map(|k| k[t]);
                let z_first = match (k, first) {
                    (Some(k), Some(f)) if mc_sd > 0.0 => Some((f[t] - k) / mc_sd),
                    _ => None,
                };
                SmoothStep { t, mean, mc_sd, kalman: k, z_first }
            })
            .collect()
    };
    let max_abs_z_first = steps.iter().filter_map(|s| s.z_first).map(f64::abs).reduce(f64::max);
    let summary = SmoothSummary {
        command: "smooth",
        config: &spec,
        seed: run.seed,
        replicates: run.replicates,
        failures: records.len() - ok.len(),
        steps,
        max_abs_z_first,
        wall_time_ms: elapsed(run, started),
    };
    finish(run, &records, &summary)?;
    failures(&res.records)
}

#[derive(Serialize)]
struct PmmhSummary<'a> {
    command: &'static str,
    config: &'a PmmhSpec,
    seed: u64,
    chains: Vec<iapf_core::inference::ChainSummary>,
    #[serde(skip_serializing_if = "skip")]
    wall_time_ms: Option<f64>,
}

pub fn pmmh(run: &Run, spec: PmmhSpec) -> Result<(), CliError> {
    spec.validate()?;
    let started = Instant::now();
    let family = spec.model.family().expect("validated family model");
    let data = spec.data.observations(&spec.model.space()?)?;
    let theta0 = spec.theta0.clone().unwrap_or_else(|| family.default_theta0(Some(&data)));
    let proposal_sd = spec.proposal_sd.clone().unwrap_or_else(|| family.default_proposal_sd());
    let priors = family.default_priors();
    let names = family.param_names();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let builder = |theta: &[f64]| family.build(theta).and_then(|s| s.bind(data.clone()));
    let chains: Vec<Result<iapf_core::Chain, String>> = run.pool.install(|| {
        (0..run.replicates)
            .into_par_iter()
            .map(|r| {
                let cfg = MhConfig {
                    chain_length: spec.chain_length,
                    proposal_sd: proposal_sd.clone(),
                    estimator: spec.estimator.core(),
                    seed: derive_seed(run.seed, r as u64),
                };
                run_pmmh(builder, &priors, &names, &theta0, &cfg).map_err(|e| e.to_string())
            })
            .collect()
    });
    let mut summaries = Vec::new();
    for (r, chain) in chains.into_iter().enumerate() {
        let chain = chain.map_err(|e| CliError::Numerical(format!("chain {r}: {e}")))?;
        write_file(run, &format!("chain_{r}.csv"), &chain.to_csv())?;
        summaries.push(chain.summary());
    }
    let summary = PmmhSummary { command: "pmmh", config: &spec, seed: run.seed, chains: summaries, wall_time_ms: elapsed(run, started) };
    let text = serde_json::to_string_pretty(&summary).expect("serializable summary") + "\n";
    write_file(run, "summary.json", &text)?;
    print!("{text}");
    Ok(())
}

pub fn prepare_returns(run: &Run, input: &Path) -> Result<(), CliError> {
    let prices = Observations::from_csv_path(input).map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
    let columns: Vec<Vec<f64>> = (0..prices.dim())
        .map(|j| {
            let col: Vec<f64> = (0..prices.len()).map(|t| prices.row(t)[j]).collect();
            mean_corrected_returns(&col).map_err(|e| CliError::Config(format!("column {}: {e}", j + 1)))
        })
        .collect::<Result<_, _>>()?;
    let rows: Vec<DVector<f64>> = (0..prices.len() - 1).map(|t| DVector::from_fn(columns.len(), |j, _| columns[j][t])).collect();
    let text = Observations::from_rows(&rows).map_err(|e| CliError::Config(e.to_string()))?.to_csv_string();
    match &run.out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Config(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
