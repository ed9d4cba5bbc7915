//! Config-driven experiment runs: build data and model, run `T` rounds,
//! write `metrics.csv`, `histograms.csv` and `summary.json`.
//!
//! Output files contain no timestamps or wall times, so a rerun with the same
//! config reproduces them byte for byte.

mod compare;
mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

pub use compare::{compare, Arm, ComparisonRow, ComparisonTable, Preset, ABLATION_AXES};
pub use config::{DatasetKind, RunConfig, KEYS};

use crate::accountant::{server_budget, third_party_epsilon, PrivacyLedger};
use crate::diagnostics::{client_drift, cross_client_var_v, Histogram, MetricRecord};
use crate::error::{Error, Result};
use crate::federation::{Federation, FederationConfig};
use crate::model::{Model, ModelKind};
use crate::optim::{AdamWHyper, AdamWOptions};
use crate::param::ParamVector;
use crate::partition::{client_quadratics, dirichlet_partition, gauss_classes, read_csv, FederatedDataset};
use crate::rng::{Purpose, StreamKey};

pub const METRICS_HEADER: &str = "t,global_loss,global_acc,var_v,drift,uplink,downlink,eps_rdp,eps_paper";
pub const HISTOGRAM_HEADER: &str = "t,kind,bin,lo,hi,count";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTOGRAMS_FILE: &str = "histograms.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// End-of-run summary. Serialised with the field order below; `wall_time_secs`
/// is reported to the caller but never written to disk.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub variant: String,
    pub model: String,
    pub dim: usize,
    pub num_blocks: usize,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: u32,
    pub local_steps: usize,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_acc: Option<f64>,
    /// `None` when `σ = 0` (no privacy).
    pub eps_rdp: Option<f64>,
    pub eps_paper: Option<f64>,
    pub delta: f64,
    pub server_eps: Option<f64>,
    pub server_delta: f64,
    pub uplink_total: u64,
    pub downlink_total: u64,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Everything a run produced, kept in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub records: Vec<MetricRecord>,
    pub final_theta: ParamVector,
}

/// Model plus federated data for a config.
pub fn build_problem(cfg: &RunConfig) -> Result<(Model, FederatedDataset)> {
    let min_per_client = cfg.resolved_min_client_samples();
    match cfg.dataset {
        DatasetKind::ClientQuadratics => {
            let curvature = log_spaced_curvature(cfg.dim, cfg.condition);
            let model = Model::quadratic(curvature, cfg.quad_blocks)?;
            let q = client_quadratics(
                cfg.dim,
                cfg.num_clients,
                cfg.heterogeneity,
                cfg.client_samples,
                cfg.sample_noise,
                StreamKey::new(cfg.seed, Purpose::Synthetic),
            )?;
            Ok((model, q.dataset))
        }
        DatasetKind::GaussClasses | DatasetKind::Csv => {
            let (samples, classes) = if cfg.dataset == DatasetKind::Csv {
                let path = cfg.csv_path.as_deref().ok_or_else(|| Error::Config("csv_path missing".into()))?;
                read_csv(path)?
            } else {
                let s = gauss_classes(
                    cfg.features,
                    cfg.classes,
                    cfg.samples,
                    cfg.class_sep,
                    StreamKey::new(cfg.seed, Purpose::Synthetic),
                )?;
                (s, cfg.classes)
            };
            let features = samples.first().map_or(0, |s| s.features.len());
            let model = match cfg.model {
                ModelKind::Logistic => Model::logistic(features, classes)?,
                ModelKind::Mlp2 => Model::mlp2(features, cfg.hidden, classes)?,
                ModelKind::Quadratic => unreachable!("rejected by validate"),
            };
            let data = dirichlet_partition(
                &samples,
                classes,
                cfg.num_clients,
                cfg.alpha,
                min_per_client,
                StreamKey::new(cfg.seed, Purpose::Partition),
            )?;
            Ok((model, data))
        }
    }
}

/// Curvatures `κ^{j/(d−1)}`, spanning `[1, κ]` geometrically.
pub fn log_spaced_curvature(dim: usize, condition: f64) -> Vec<f64> {
    if dim == 1 {
        return vec![1.0];
    }
    (0..dim)
        .map(|j| condition.powf(j as f64 / (dim - 1) as f64))
        .collect()
}

pub fn federation_config(cfg: &RunConfig) -> FederationConfig {
    FederationConfig {
        variant: cfg.variant,
        hyper: AdamWHyper {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps_adam,
            weight_decay: cfg.weight_decay,
            gamma: cfg.gamma,
        },
        options: AdamWOptions {
            dp_bias_correction: cfg.bias_correction,
            strict_alg1: cfg.strict_alg1,
            identity_preconditioner: cfg.identity_preconditioner,
        },
        aggregation: cfg.aggregation,
        clip_norm: cfg.clip,
        noise_multiplier: cfg.sigma,
        sample_rate: cfg.sample_rate,
        local_steps: cfg.local_steps,
        clients_per_round: cfg.resolved_clients_per_round(),
        seed: cfg.seed,
        execution: cfg.execution,
    }
}

/// Runs the experiment without touching the filesystem (except to read a
/// CSV dataset).
pub fn run_in_memory(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let started = Instant::now();
    let (model, data) = build_problem(cfg)?;
    let theta0 = model.init_params(&mut StreamKey::new(cfg.seed, Purpose::Init).rng());
    let fed = Federation::new(model, data, federation_config(cfg))?;
    let mut state = fed.initial_state(theta0)?;
    let (initial_loss, initial_acc) = fed.evaluate(&state.theta)?;

    let private = cfg.sigma > 0.0;
    let mut ledger = PrivacyLedger::new();
    let mut records = Vec::with_capacity(cfg.rounds as usize);
    let (mut uplink_total, mut downlink_total) = (0u64, 0u64);
    let (mut final_loss, mut final_acc) = (initial_loss, initial_acc);

    for _ in 0..cfg.rounds {
        let (next, outcome) = fed.run_round(&state)?;
        state = next;
        if private {
            ledger.record(cfg.sigma, cfg.sample_rate, cfg.local_steps as u64)?;
        }
        let (loss, acc) = fed.evaluate(&state.theta)?;
        (final_loss, final_acc) = (loss, acc);
        uplink_total += outcome.uplink;
        downlink_total += outcome.downlink;

        let vs: Vec<ParamVector> = outcome.reports.iter().map(|r| r.v.clone()).collect();
        let ends: Vec<ParamVector> = outcome.reports.iter().map(|r| r.endpoint.clone()).collect();
        let (var_v, drift) = if vs.len() >= 2 {
            (cross_client_var_v(&vs)?, client_drift(&ends)?)
        } else {
            (f64::NAN, f64::NAN)
        };
        let ms: Vec<ParamVector> = outcome.reports.iter().map(|r| r.m.clone()).collect();
        let sqrt_v: Vec<ParamVector> = outcome
            .reports
            .iter()
            .map(|r| ParamVector::from_vec_unchecked(r.v_hat.iter().map(|x| x.max(0.0).sqrt()).collect()))
            .collect();
        let mut hist_m = Histogram::new(-cfg.hist_m_range, cfg.hist_m_range, cfg.hist_bins)?;
        hist_m.fill(ParamVector::mean_of(&ms)?.iter());
        let mut hist_sqrt_v = Histogram::new(0.0, cfg.hist_sqrt_v_max, cfg.hist_bins)?;
        hist_sqrt_v.fill(ParamVector::mean_of(&sqrt_v)?.iter());

        let (eps_rdp, eps_paper) = epsilons(cfg, &ledger, state.t)?;
        records.push(MetricRecord {
            t: state.t,
            global_loss: loss,
            global_acc: acc,
            var_v,
            drift,
            hist_m,
            hist_sqrt_v,
            uplink: outcome.uplink,
            downlink: outcome.downlink,
            eps_rdp,
            eps_paper,
        });
    }

    let (eps_rdp, eps_paper) = epsilons(cfg, &ledger, cfg.rounds)?;
    let server_delta;
    let server_eps = if eps_rdp.is_finite() {
        let b = server_budget(eps_rdp, cfg.delta, cfg.num_clients, cfg.resolved_participation())?;
        server_delta = b.delta;
        Some(b.epsilon)
    } else {
        server_delta = server_budget(0.0, cfg.delta, cfg.num_clients, cfg.resolved_participation())?.delta;
        None
    };
    let finite = |x: f64| x.is_finite().then_some(x);
    let summary = RunSummary {
        config_hash: cfg.hash(),
        variant: cfg.variant.as_str().into(),
        model: fed.model().kind().to_string(),
        dim: fed.model().dim(),
        num_blocks: fed.model().layout().num_blocks(),
        num_clients: cfg.num_clients,
        clients_per_round: cfg.resolved_clients_per_round(),
        rounds: cfg.rounds,
        local_steps: cfg.local_steps,
        seed: cfg.seed,
        initial_loss,
        final_loss,
        final_acc,
        eps_rdp: finite(eps_rdp),
        eps_paper: finite(eps_paper),
        delta: cfg.delta,
        server_eps,
        server_delta,
        uplink_total,
        downlink_total,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunResult {
        summary,
        records,
        final_theta: state.theta,
    })
}

/// `(ε_RDP, ε_paper)` after `rounds` rounds; both infinite without noise.
fn epsilons(cfg: &RunConfig, ledger: &PrivacyLedger, rounds: u32) -> Result<(f64, f64)> {
    if cfg.sigma == 0.0 {
        return Ok(if rounds == 0 { (0.0, 0.0) } else { (f64::INFINITY, f64::INFINITY) });
    }
    Ok((
        ledger.compose_and_convert(cfg.delta)?.epsilon,
        third_party_epsilon(cfg.sample_rate, u64::from(rounds), cfg.local_steps as u64, cfg.delta, cfg.sigma)?,
    ))
}

/// Output directory, honouring the `OUTPUT_DIR` environment override.
pub fn resolve_output_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os("OUTPUT_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output_dir.clone(),
    }
}

/// Validates, runs and writes outputs to the resolved output directory.
/// Nothing is written if the config is invalid or the run fails.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = resolve_output_dir(cfg);
    let result = run_in_memory(cfg)?;
    write_outputs(&dir, &result)?;
    Ok(result.summary)
}

/// 17 significant digits; `inf`/`NaN` for non-finite values.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let acc = r.global_acc.map(fmt_float).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.t,
            fmt_float(r.global_loss),
            acc,
            fmt_float(r.var_v),
            fmt_float(r.drift),
            r.uplink,
            r.downlink,
            fmt_float(r.eps_rdp),
            fmt_float(r.eps_paper)
        ));
    }
    out
}

pub fn histograms_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from(HISTOGRAM_HEADER);
    out.push('\n');
    for r in records {
        for (kind, h) in [("m", &r.hist_m), ("sqrt_v", &r.hist_sqrt_v)] {
            let edges = h.edges();
            for (b, c) in h.counts.iter().enumerate() {
                out.push_str(&format!(
                    "{},{kind},{b},{},{},{c}\n",
                    r.t,
                    fmt_float(edges[b]),
                    fmt_float(edges[b + 1])
                ));
            }
        }
    }
    out
}

pub fn summary_json(summary: &RunSummary) -> Result<String> {
    let mut s = serde_json::to_string_pretty(summary)?;
    s.push('\n');
    Ok(s)
}

/// Writes all three files into `dir`, creating it if needed.
pub fn write_outputs(dir: &Path, result: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let files = [
        (METRICS_FILE, metrics_csv(&result.records)),
        (HISTOGRAMS_FILE, histograms_csv(&result.records)),
        (SUMMARY_FILE, summary_json(&result.summary)?),
    ];
    for (name, body) in files {
        let mut f = fs::File::create(dir.join(name))?;
        f.write_all(body.as_bytes())?;
    }
    Ok(())
}
