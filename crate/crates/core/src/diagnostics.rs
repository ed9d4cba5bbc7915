//! Measurements of second-moment variance, client drift and DP-induced
//! second-moment bias.
//!
//! Drift is defined as the mean squared distance of client endpoints to
//! their mean, `(1/S)Σ_i‖θ_i − θ̄‖²`. It is translation invariant, so it
//! isolates disagreement between clients from global progress.

use serde::{Deserialize, Serialize};

use crate::dp::{noisy_batch_mean, DPConfig, NoiseStream};
use crate::error::{ensure_dim, Error, Result};
use crate::exec::Execution;
use crate::optim::{AdamWHyper, AdamWOptions, DPAdamWState};
use crate::param::ParamVector;
use crate::rng::{Purpose, StreamKey};

/// Mean over coordinates of the unbiased (n−1) variance across clients.
pub fn cross_client_var_v(vs: &[ParamVector]) -> Result<f64> {
    if vs.len() < 2 {
        return Err(Error::Contract(format!("variance across clients needs >= 2 clients, got {}", vs.len())));
    }
    let d = vs[0].dim();
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for (n, v) in vs.iter().enumerate() {
        ensure_dim(d, v.dim())?;
        let n = (n + 1) as f64;
        for j in 0..d {
            let delta = v[j] - mean[j];
            mean[j] += delta / n;
            m2[j] += delta * (v[j] - mean[j]);
        }
    }
    let denom = (vs.len() - 1) as f64;
    Ok(m2.iter().map(|x| x / denom).sum::<f64>() / d.max(1) as f64)
}

/// `(1/S) Σ_i ‖θ_i − θ̄‖²`.
pub fn client_drift(endpoints: &[ParamVector]) -> Result<f64> {
    if endpoints.len() < 2 {
        return Err(Error::Contract(format!("drift needs >= 2 clients, got {}", endpoints.len())));
    }
    let center = ParamVector::mean_of(endpoints)?;
    Ok(endpoints
        .iter()
        .map(|e| {
            let diff = e.sub(&center);
            diff.dot(&diff)
        })
        .sum::<f64>()
        / endpoints.len() as f64)
}

/// Fixed-edge histogram. Values outside `[lo, hi)` land in the edge bins so
/// the total mass always equals the number of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(hi > lo) || bins == 0 {
            return Err(Error::Config(format!("bad histogram range [{lo}, {hi}) with {bins} bins")));
        }
        Ok(Self {
            lo,
            hi,
            counts: vec![0; bins],
        })
    }

    pub fn fill<'a>(&mut self, values: impl IntoIterator<Item = &'a f64>) {
        let bins = self.counts.len();
        let width = (self.hi - self.lo) / bins as f64;
        for &x in values {
            let b = if x.is_nan() || x < self.lo {
                0
            } else {
                (((x - self.lo) / width) as usize).min(bins - 1)
            };
            self.counts[b] += 1;
        }
    }

    pub fn mass(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }
}

/// One row of per-round diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub t: u32,
    pub global_loss: f64,
    pub global_acc: Option<f64>,
    pub var_v: f64,
    pub drift: f64,
    pub hist_m: Histogram,
    pub hist_sqrt_v: Histogram,
    pub uplink: u64,
    pub downlink: u64,
    pub eps_rdp: f64,
    pub eps_paper: f64,
}

/// Monte-Carlo estimates from [`bias_probe`], one entry per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasProbe {
    pub steps: u64,
    pub replicates: usize,
    /// `1 − β₂ᵏ`.
    pub init_factor: f64,
    /// `(σC/(sR))²`.
    pub noise_variance: f64,
    /// Mean of `v^k`.
    pub mean_v: Vec<f64>,
    pub se_v: Vec<f64>,
    /// Mean of `v̂^k = v^k/(1−β₂ᵏ)`.
    pub mean_v_hat: Vec<f64>,
    pub se_v_hat: Vec<f64>,
    /// Mean of `v̂^k − (σC/(sR))²`.
    pub mean_v_corrected: Vec<f64>,
}

/// Runs `replicates` independent k-step second-moment recursions driven by a
/// constant true gradient `g` plus DP noise, and averages `v^k`.
///
/// The batch is `⌊sR⌋` copies of `g`; `‖g‖ < C` is required so clipping never
/// fires and the only distortion is the additive noise.
pub fn bias_probe(
    cfg: &DPConfig,
    g: &ParamVector,
    beta2: f64,
    steps: u64,
    replicates: usize,
    key: StreamKey,
    exec: Execution,
) -> Result<BiasProbe> {
    cfg.validate()?;
    g.ensure_finite("bias probe gradient")?;
    if g.l2_norm() >= cfg.clip_norm {
        return Err(Error::Config(format!(
            "bias probe needs ||g|| < C (got {} >= {}); clipping would distort it",
            g.l2_norm(),
            cfg.clip_norm
        )));
    }
    if steps == 0 || replicates < 2 {
        return Err(Error::Config("bias probe needs steps >= 1 and >= 2 replicates".into()));
    }
    let hyper = AdamWHyper {
        beta2,
        ..AdamWHyper::default()
    };
    hyper.validate()?;
    let options = AdamWOptions::default();
    let batch = vec![g.clone(); cfg.batch_size()];
    let d = g.dim();

    let runs = exec
        .map_range(replicates, |rep| -> Result<(ParamVector, ParamVector)> {
            let mut state = DPAdamWState::new(d, hyper);
            let rep_key = StreamKey {
                client: u32::try_from(rep).unwrap_or(u32::MAX),
                ..key
            };
            let mut v_hat = ParamVector::zeros(d);
            for k in 1..=steps {
                let mut noise = NoiseStream::from_key(StreamKey { step: k, ..rep_key });
                let noisy = noisy_batch_mean(&batch, cfg, &mut noise)?;
                v_hat = state.moment_update(&noisy, &options)?.1;
            }
            Ok((state.v, v_hat))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let n = replicates as f64;
    let moments = |pick: &dyn Fn(&(ParamVector, ParamVector)) -> f64| {
        let mean = runs.iter().map(pick).sum::<f64>() / n;
        let var = runs.iter().map(|r| (pick(r) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let (mut mean_v, mut se_v, mut mean_v_hat, mut se_v_hat) = (vec![], vec![], vec![], vec![]);
    for j in 0..d {
        let (m, s) = moments(&|r| r.0[j]);
        mean_v.push(m);
        se_v.push(s);
        let (m, s) = moments(&|r| r.1[j]);
        mean_v_hat.push(m);
        se_v_hat.push(s);
    }
    let noise_variance = cfg.noise_variance();
    Ok(BiasProbe {
        steps,
        replicates,
        init_factor: 1.0 - beta2.powi(i32::try_from(steps).unwrap_or(i32::MAX)),
        noise_variance,
        mean_v_corrected: mean_v_hat.iter().map(|m| m - noise_variance).collect(),
        mean_v,
        se_v,
        mean_v_hat,
        se_v_hat,
    })
}

/// Default key for bias probes driven by `seed`.
pub fn probe_key(seed: u64) -> StreamKey {
    StreamKey::new(seed, Purpose::MonteCarlo)
}
