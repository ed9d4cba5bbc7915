//! Server-side round orchestration: client sampling, local training,
//! aggregation of deltas and block statistics, the alignment direction and
//! payload accounting.

use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dp::{clip, noisy_batch_mean, DPConfig, NoiseStream};
use crate::error::{config_err, Error, Result};
use crate::exec::Execution;
use crate::model::{Model, Sample};
use crate::optim::{sgd_local_step, AdamWHyper, AdamWOptions, DPAdamWState, OptimizerVariant};
use crate::param::{block_mean, BlockLayout, BlockStats, ParamVector};
use crate::partition::FederatedDataset;
use crate::rng::{Purpose, StreamKey, StreamRng};

/// What clients send besides their parameter delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Deltas only ("NoAgg").
    None,
    /// The full second-moment vector ("Agg-v").
    Full,
    /// One second-moment mean per parameter block ("Agg-mean-v").
    BlockMean,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Full => "full",
            Self::BlockMean => "block_mean",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "full" => Ok(Self::Full),
            "block_mean" => Ok(Self::BlockMean),
            other => config_err(format!("unknown aggregation '{other}'")),
        }
    }
}

/// Floats moved per client per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub uplink: u64,
    pub downlink: u64,
}

/// Per-client communication cost.
///
/// Uplink is `d` plus `B` second-moment statistics when they are aggregated
/// (`B = d` for full aggregation). Downlink is `θ`, plus the `B` aggregated
/// statistics, plus the dense `Δ_G` when alignment is active.
pub fn payload_count(variant: OptimizerVariant, aggregation: Aggregation, alignment: bool, d: usize, blocks: usize) -> Payload {
    let (d, b) = (d as u64, blocks as u64);
    let fed = variant == OptimizerVariant::DpFedAdamW;
    let stats = match (fed, aggregation) {
        (true, Aggregation::BlockMean) => b,
        (true, Aggregation::Full) => d,
        _ => 0,
    };
    let align = if fed && alignment { d } else { 0 };
    Payload {
        uplink: d + stats,
        downlink: d + stats + align,
    }
}

/// Uniform `S`-subset of `0..N`, returned in ascending order.
pub fn sample_clients(num_clients: usize, per_round: usize, key: StreamKey) -> Result<Vec<usize>> {
    if per_round == 0 || per_round > num_clients {
        return config_err(format!("cannot select {per_round} of {num_clients} clients"));
    }
    let mut rng = key.rng();
    let mut ids = index::sample(&mut rng, num_clients, per_round).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Everything a round needs besides the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub variant: OptimizerVariant,
    pub hyper: AdamWHyper,
    pub options: AdamWOptions,
    pub aggregation: Aggregation,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sample_rate: f64,
    pub local_steps: usize,
    pub clients_per_round: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl FederationConfig {
    /// Aggregation actually applied: only DP-FedAdamW shares second moments.
    pub fn effective_aggregation(&self) -> Aggregation {
        if self.variant == OptimizerVariant::DpFedAdamW {
            self.aggregation
        } else {
            Aggregation::None
        }
    }

    /// Alignment coefficient actually applied.
    pub fn effective_gamma(&self) -> f64 {
        if self.variant == OptimizerVariant::DpFedAdamW {
            self.hyper.gamma
        } else {
            0.0
        }
    }

    fn validate(&self, num_clients: usize) -> Result<()> {
        self.hyper.validate()?;
        if self.local_steps == 0 {
            return config_err("local steps K must be >= 1");
        }
        if self.clients_per_round == 0 || self.clients_per_round > num_clients {
            return config_err(format!(
                "clients per round S={} must be in 1..={num_clients}",
                self.clients_per_round
            ));
        }
        DPConfig::new(self.clip_norm, self.noise_multiplier, self.sample_rate, usize::MAX >> 8)?;
        Ok(())
    }
}

/// Global server state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub theta: ParamVector,
    pub vbar: BlockStats,
    pub delta_g: ParamVector,
    pub t: u32,
}

/// What one client produces in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: usize,
    /// `θ_i^{t,K} − θ_i^{t,0}`.
    pub delta: ParamVector,
    /// Block means of `v^{t,K}`; zero when second moments are not shared.
    pub block_v: BlockStats,
    pub uplink_floats: u64,
    /// Local diagnostics, not transmitted.
    pub endpoint: ParamVector,
    pub m: ParamVector,
    pub v: ParamVector,
    pub v_hat: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub selected: Vec<usize>,
    pub reports: Vec<ClientReport>,
    pub uplink: u64,
    pub downlink: u64,
}

/// A model, its clients' data and the protocol settings.
#[derive(Debug, Clone)]
pub struct Federation {
    model: Model,
    data: FederatedDataset,
    config: FederationConfig,
    agg_layout: Arc<BlockLayout>,
}

impl Federation {
    pub fn new(model: Model, data: FederatedDataset, config: FederationConfig) -> Result<Self> {
        if data.num_clients() == 0 {
            return config_err("federation needs at least one client");
        }
        config.validate(data.num_clients())?;
        for (i, samples) in data.clients.iter().enumerate() {
            let cfg = DPConfig::new(config.clip_norm, config.noise_multiplier, config.sample_rate, samples.len())
                .map_err(|e| Error::Config(format!("client {i}: {e}")))?;
            debug_assert!(cfg.batch_size() >= 1);
        }
        let agg_layout = match config.effective_aggregation() {
            Aggregation::Full => Arc::new(BlockLayout::per_coordinate(model.dim())?),
            _ => model.layout().clone(),
        };
        Ok(Self {
            model,
            data,
            config,
            agg_layout,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn data(&self) -> &FederatedDataset {
        &self.data
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn aggregation_layout(&self) -> &Arc<BlockLayout> {
        &self.agg_layout
    }

    /// Round-zero state: `θ⁰` given, `v̄⁰ = 0`, `Δ_G⁰ = 0`.
    pub fn initial_state(&self, theta: ParamVector) -> Result<RoundState> {
        theta.ensure_finite("initial model")?;
        crate::error::ensure_dim(self.model.dim(), theta.dim())?;
        Ok(RoundState {
            delta_g: ParamVector::zeros(theta.dim()),
            vbar: BlockStats::zeros(self.agg_layout.clone()),
            theta,
            t: 0,
        })
    }

    pub fn payload(&self) -> Payload {
        payload_count(
            self.config.variant,
            self.config.effective_aggregation(),
            self.config.effective_gamma() > 0.0,
            self.model.dim(),
            self.agg_layout.num_blocks(),
        )
    }

    /// Runs every selected client, then aggregates in ascending client order.
    /// Any client error aborts the round without touching `state`.
    pub fn run_round(&self, state: &RoundState) -> Result<(RoundState, RoundOutcome)> {
        let cfg = &self.config;
        let key = StreamKey::new(cfg.seed, Purpose::ClientSampling).round(state.t);
        let selected = sample_clients(self.data.num_clients(), cfg.clients_per_round, key)?;
        let reports = cfg
            .execution
            .map_slice(&selected, |&i| self.train_client(i, state))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let next = self.aggregate(state, &reports)?;
        let payload = self.payload();
        let s = selected.len() as u64;
        Ok((
            next,
            RoundOutcome {
                selected,
                reports,
                uplink: payload.uplink * s,
                downlink: payload.downlink * s,
            },
        ))
    }

    /// `θ += (1/S)Σδ_i`, `Δ_G = −(1/(SKη))Σδ_i`, `v̄ = (1/S)Σ v̄_i`.
    pub fn aggregate(&self, state: &RoundState, reports: &[ClientReport]) -> Result<RoundState> {
        if reports.is_empty() {
            return Err(Error::Contract("aggregation with no client reports".into()));
        }
        let s = reports.len() as f64;
        let mut sum = ParamVector::zeros(state.theta.dim());
        for r in reports {
            state.theta.check_dim(&r.delta)?;
            sum.axpy(1.0, &r.delta);
        }
        let mut theta = state.theta.clone();
        theta.axpy(1.0 / s, &sum);
        theta.ensure_finite("aggregated model")?;
        let k = self.config.local_steps as f64;
        let delta_g = sum.scaled(-1.0 / (s * k * self.config.hyper.lr));
        let vbar = if self.config.effective_aggregation() == Aggregation::None {
            BlockStats::zeros(self.agg_layout.clone())
        } else {
            let stats: Vec<BlockStats> = reports.iter().map(|r| r.block_v.clone()).collect();
            BlockStats::mean_of(&stats)?
        };
        Ok(RoundState {
            theta,
            vbar,
            delta_g,
            t: state.t + 1,
        })
    }

    /// K local steps of the configured variant for client `client`.
    pub fn train_client(&self, client: usize, state: &RoundState) -> Result<ClientReport> {
        let cfg = &self.config;
        let samples = &self.data.clients[client];
        let dp = DPConfig::new(cfg.clip_norm, cfg.noise_multiplier, cfg.sample_rate, samples.len())?;
        let aggregation = cfg.effective_aggregation();
        let hyper = AdamWHyper {
            gamma: cfg.effective_gamma(),
            ..cfg.hyper
        };
        let mut opt = DPAdamWState::new(self.model.dim(), hyper);
        let warm = (aggregation != Aggregation::None).then_some(&state.vbar);
        opt.init_round(cfg.variant, warm)?;
        let bc_shift = if cfg.variant == OptimizerVariant::DpFedAdamW && cfg.options.dp_bias_correction {
            dp.noise_variance()
        } else {
            0.0
        };

        let theta0 = state.theta.clone();
        let mut theta = theta0.clone();
        let client_id = u32::try_from(client).map_err(|_| Error::Config("client id overflow".into()))?;
        for k in 1..=cfg.local_steps as u64 {
            let mut batch_rng = StreamKey::new(cfg.seed, Purpose::BatchSampling)
                .round(state.t)
                .client(client_id)
                .step(k)
                .rng();
            let clipped = self.clipped_batch(&theta, samples, dp.batch_size(), dp.clip_norm, &mut batch_rng)?;
            let mut noise = NoiseStream::new(cfg.seed, state.t, client_id, k);
            let g = noisy_batch_mean(&clipped, &dp, &mut noise)?;
            theta = if cfg.variant.is_adaptive() {
                opt.local_step(&g, &state.delta_g, &theta, bc_shift, &cfg.options)?
            } else {
                sgd_local_step(&theta, &g, hyper.lr, hyper.weight_decay)?
            };
        }

        let block_v = if aggregation == Aggregation::None {
            BlockStats::zeros(self.agg_layout.clone())
        } else {
            block_mean(&opt.v, &self.agg_layout)?
        };
        let v_hat = if opt.k > 0 && cfg.variant.is_adaptive() {
            opt.bias_corrected(&cfg.options).1
        } else {
            opt.v.clone()
        };
        Ok(ClientReport {
            client_id: client,
            delta: theta.sub(&theta0),
            block_v,
            uplink_floats: self.payload().uplink,
            endpoint: theta,
            m: opt.m,
            v: opt.v,
            v_hat,
        })
    }

    fn clipped_batch(
        &self,
        theta: &ParamVector,
        samples: &[Sample],
        batch: usize,
        clip_norm: f64,
        rng: &mut StreamRng,
    ) -> Result<Vec<ParamVector>> {
        let mut idx = index::sample(rng, samples.len(), batch).into_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|j| clip(&self.model.per_sample_grad(theta, &samples[j])?, clip_norm))
            .collect()
    }

    /// Federated objective `(1/N) Σ_i f_i(θ)` with `f_i` the mean sample loss
    /// of client `i`, plus the client-averaged accuracy for classifiers.
    pub fn evaluate(&self, theta: &ParamVector) -> Result<(f64, Option<f64>)> {
        evaluate(&self.model, &self.data, theta, self.config.execution)
    }
}

pub fn evaluate(model: &Model, data: &FederatedDataset, theta: &ParamVector, exec: Execution) -> Result<(f64, Option<f64>)> {
    let per_client = exec
        .map_slice(&data.clients, |samples| -> Result<(f64, f64)> {
            let mut loss = 0.0;
            let mut correct = 0usize;
            for s in samples {
                loss += model.loss(theta, s)?;
                if let (Some(p), Some(c)) = (model.predict(theta, s)?, s.class()) {
                    correct += usize::from(p == c);
                }
            }
            let n = samples.len().max(1) as f64;
            Ok((loss / n, correct as f64 / n))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = per_client.len() as f64;
    let loss = per_client.iter().map(|x| x.0).sum::<f64>() / n;
    let acc = model
        .num_classes()
        .map(|_| per_client.iter().map(|x| x.1).sum::<f64>() / n);
    Ok((loss, acc))
}
