//! Run configuration: a flat `key = value` text format, one key per line,
//! `#` starts a comment. Every key can also be given as a CLI flag of the
//! same name.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::exec::Execution;
use crate::federation::Aggregation;
use crate::model::ModelKind;
use crate::optim::OptimizerVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    GaussClasses,
    ClientQuadratics,
    Csv,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::GaussClasses => "gauss_classes",
            Self::ClientQuadratics => "client_quadratics",
            Self::Csv => "csv",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss_classes" => Ok(Self::GaussClasses),
            "client_quadratics" => Ok(Self::ClientQuadratics),
            "csv" => Ok(Self::Csv),
            other => config_err(format!("unknown dataset '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: OptimizerVariant,
    pub model: ModelKind,
    pub hidden: usize,

    pub dataset: DatasetKind,
    pub csv_path: Option<PathBuf>,
    pub features: usize,
    pub classes: usize,
    pub samples: usize,
    pub class_sep: f64,
    pub dim: usize,
    pub heterogeneity: f64,
    pub sample_noise: f64,
    pub client_samples: usize,
    pub condition: f64,
    pub quad_blocks: usize,
    pub alpha: f64,
    /// Minimum samples per client after partitioning; `None` means `⌈1/s⌉`,
    /// the least that gives every client a batch.
    pub min_client_samples: Option<usize>,

    pub num_clients: usize,
    pub clients_per_round: Option<usize>,
    pub participation: Option<f64>,
    pub rounds: u32,
    pub local_steps: usize,
    pub sample_rate: f64,

    pub clip: f64,
    pub sigma: f64,
    pub delta: f64,

    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub aggregation: Aggregation,
    pub bias_correction: bool,
    pub strict_alg1: bool,
    pub identity_preconditioner: bool,

    pub hist_bins: usize,
    pub hist_m_range: f64,
    pub hist_sqrt_v_max: f64,

    pub seed: u64,
    pub execution: Execution,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    /// Quadratic demo: 10 heterogeneous clients, 50 rounds, σ = 1, γ = 0.5.
    fn default() -> Self {
        Self {
            variant: OptimizerVariant::DpFedAdamW,
            model: ModelKind::Quadratic,
            hidden: 16,
            dataset: DatasetKind::ClientQuadratics,
            csv_path: None,
            features: 20,
            classes: 10,
            samples: 5000,
            class_sep: 1.0,
            dim: 10,
            heterogeneity: 1.0,
            sample_noise: 0.5,
            client_samples: 100,
            condition: 1.0,
            quad_blocks: 1,
            alpha: 0.1,
            min_client_samples: None,
            num_clients: 10,
            clients_per_round: None,
            participation: None,
            rounds: 50,
            local_steps: 10,
            sample_rate: 0.1,
            clip: 1.0,
            sigma: 1.0,
            delta: 1e-5,
            lr: 0.01,
            weight_decay: 0.01,
            gamma: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 0.01,
            aggregation: Aggregation::BlockMean,
            bias_correction: true,
            strict_alg1: true,
            identity_preconditioner: false,
            hist_bins: 20,
            hist_m_range: 1.0,
            hist_sqrt_v_max: 1.0,
            seed: 0,
            execution: Execution::Parallel,
            output_dir: PathBuf::from("runs/latest"),
        }
    }
}

/// Every recognised key, in canonical order.
pub const KEYS: &[&str] = &[
    "variant",
    "model",
    "hidden",
    "dataset",
    "csv_path",
    "features",
    "classes",
    "samples",
    "class_sep",
    "dim",
    "heterogeneity",
    "sample_noise",
    "client_samples",
    "condition",
    "quad_blocks",
    "alpha",
    "min_client_samples",
    "num_clients",
    "clients_per_round",
    "participation",
    "rounds",
    "local_steps",
    "sample_rate",
    "clip",
    "sigma",
    "delta",
    "lr",
    "weight_decay",
    "gamma",
    "beta1",
    "beta2",
    "eps_adam",
    "aggregation",
    "bias_correction",
    "strict_alg1",
    "preconditioner",
    "hist_bins",
    "hist_m_range",
    "hist_sqrt_v_max",
    "seed",
    "execution",
    "output_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("{key} = '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => config_err(format!("{key} = '{value}': expected true or false")),
    }
}

/// Shortest round-trip representation, identical on every platform.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{raw}'", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = parse(key, value)?,
            "model" => self.model = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "dataset" => self.dataset = parse(key, value)?,
            "csv_path" => self.csv_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "features" => self.features = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "class_sep" => self.class_sep = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "heterogeneity" => self.heterogeneity = parse(key, value)?,
            "sample_noise" => self.sample_noise = parse(key, value)?,
            "client_samples" => self.client_samples = parse(key, value)?,
            "condition" => self.condition = parse(key, value)?,
            "quad_blocks" => self.quad_blocks = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "min_client_samples" => {
                self.min_client_samples = (!value.is_empty()).then(|| parse(key, value)).transpose()?
            }
            "num_clients" => self.num_clients = parse(key, value)?,
            "clients_per_round" => {
                self.clients_per_round = (!value.is_empty()).then(|| parse(key, value)).transpose()?
            }
            "participation" => self.participation = (!value.is_empty()).then(|| parse(key, value)).transpose()?,
            "rounds" => self.rounds = parse(key, value)?,
            "local_steps" => self.local_steps = parse(key, value)?,
            "sample_rate" => self.sample_rate = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps_adam" => self.eps_adam = parse(key, value)?,
            "aggregation" => self.aggregation = parse(key, value)?,
            "bias_correction" => self.bias_correction = parse_bool(key, value)?,
            "strict_alg1" => self.strict_alg1 = parse_bool(key, value)?,
            "preconditioner" => {
                self.identity_preconditioner = match value {
                    "adaptive" => false,
                    "identity" => true,
                    _ => return config_err(format!("preconditioner = '{value}': expected adaptive or identity")),
                }
            }
            "hist_bins" => self.hist_bins = parse(key, value)?,
            "hist_m_range" => self.hist_m_range = parse(key, value)?,
            "hist_sqrt_v_max" => self.hist_sqrt_v_max = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "execution" => {
                self.execution = match value {
                    "parallel" => Execution::Parallel,
                    "sequential" => Execution::Sequential,
                    _ => return config_err(format!("execution = '{value}': expected parallel or sequential")),
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => return config_err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    /// `S`, either given directly or `⌈l·N⌉`; defaults to all clients.
    pub fn resolved_clients_per_round(&self) -> usize {
        match (self.clients_per_round, self.participation) {
            (Some(s), _) => s,
            (None, Some(l)) => ((l * self.num_clients as f64).ceil() as usize).max(1),
            (None, None) => self.num_clients,
        }
    }

    pub fn resolved_min_client_samples(&self) -> usize {
        self.min_client_samples
            .unwrap_or((1.0 / self.sample_rate).ceil() as usize)
    }

    /// Client participation rate `l`.
    pub fn resolved_participation(&self) -> f64 {
        self.participation
            .unwrap_or(self.resolved_clients_per_round() as f64 / self.num_clients as f64)
    }

    /// Checks every range before any work happens.
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, x: f64| -> Result<()> {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                config_err(format!("{name} must be positive and finite, got {x}"))
            }
        };
        let nonneg = |name: &str, x: f64| -> Result<()> {
            if x >= 0.0 && x.is_finite() {
                Ok(())
            } else {
                config_err(format!("{name} must be >= 0 and finite, got {x}"))
            }
        };
        match (self.model, self.dataset) {
            (ModelKind::Quadratic, DatasetKind::ClientQuadratics) => {}
            (ModelKind::Quadratic, _) | (_, DatasetKind::ClientQuadratics) => {
                return config_err("the quadratic model and the client_quadratics dataset go together");
            }
            _ => {}
        }
        if self.dataset == DatasetKind::Csv && self.csv_path.is_none() {
            return config_err("dataset = csv needs csv_path");
        }
        if self.num_clients < 2 {
            return config_err("num_clients must be >= 2");
        }
        if self.clients_per_round.is_some() && self.participation.is_some() {
            return config_err("give either clients_per_round or participation, not both");
        }
        if let Some(l) = self.participation {
            if !(l > 0.0 && l <= 1.0) {
                return config_err(format!("participation must be in (0, 1], got {l}"));
            }
        }
        let s = self.resolved_clients_per_round();
        if s == 0 || s > self.num_clients {
            return config_err(format!("clients_per_round must be in 1..={}, got {s}", self.num_clients));
        }
        if self.local_steps == 0 {
            return config_err("local_steps must be >= 1");
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return config_err(format!("sample_rate must be in (0, 1], got {}", self.sample_rate));
        }
        pos("clip", self.clip)?;
        nonneg("sigma", self.sigma)?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return config_err(format!("delta must be in (0, 1), got {}", self.delta));
        }
        pos("lr", self.lr)?;
        nonneg("weight_decay", self.weight_decay)?;
        nonneg("gamma", self.gamma)?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config_err("beta1 and beta2 must lie in [0, 1)");
        }
        pos("eps_adam", self.eps_adam)?;
        pos("alpha", self.alpha)?;
        pos("class_sep", self.class_sep)?;
        nonneg("heterogeneity", self.heterogeneity)?;
        nonneg("sample_noise", self.sample_noise)?;
        pos("condition", self.condition)?;
        pos("hist_m_range", self.hist_m_range)?;
        pos("hist_sqrt_v_max", self.hist_sqrt_v_max)?;
        if self.hist_bins == 0 {
            return config_err("hist_bins must be >= 1");
        }
        match self.model {
            ModelKind::Quadratic => {
                if self.dim == 0 || self.quad_blocks == 0 || self.quad_blocks > self.dim {
                    return config_err("quadratic needs dim >= 1 and 1 <= quad_blocks <= dim");
                }
                if self.client_samples == 0 || (self.sample_rate * self.client_samples as f64).floor() < 1.0 {
                    return config_err("floor(sample_rate * client_samples) must be >= 1");
                }
            }
            ModelKind::Logistic | ModelKind::Mlp2 => {
                if self.model == ModelKind::Mlp2 && self.hidden == 0 {
                    return config_err("hidden must be >= 1");
                }
                if self.dataset == DatasetKind::GaussClasses
                    && (self.features == 0 || self.classes < 2 || self.samples < self.num_clients)
                {
                    return config_err("gauss_classes needs features >= 1, classes >= 2, samples >= num_clients");
                }
            }
        }
        Ok(())
    }

    /// `(key, value)` pairs that determine the run's output, in canonical
    /// order. Keys irrelevant to the chosen model or dataset are left out.
    pub fn semantic_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out: Vec<(&'static str, String)> = Vec::new();
        let mut push = |k: &'static str, v: String| out.push((k, v));
        push("variant", self.variant.as_str().into());
        push("model", self.model.as_str().into());
        if self.model == ModelKind::Mlp2 {
            push("hidden", self.hidden.to_string());
        }
        push("dataset", self.dataset.as_str().into());
        match self.dataset {
            DatasetKind::Csv => {
                push(
                    "csv_path",
                    self.csv_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                );
                push("alpha", fmt_f64(self.alpha));
                push("min_client_samples", self.resolved_min_client_samples().to_string());
            }
            DatasetKind::GaussClasses => {
                push("features", self.features.to_string());
                push("classes", self.classes.to_string());
                push("samples", self.samples.to_string());
                push("class_sep", fmt_f64(self.class_sep));
                push("alpha", fmt_f64(self.alpha));
                push("min_client_samples", self.resolved_min_client_samples().to_string());
            }
            DatasetKind::ClientQuadratics => {
                push("dim", self.dim.to_string());
                push("heterogeneity", fmt_f64(self.heterogeneity));
                push("sample_noise", fmt_f64(self.sample_noise));
                push("client_samples", self.client_samples.to_string());
                push("condition", fmt_f64(self.condition));
                push("quad_blocks", self.quad_blocks.to_string());
            }
        }
        push("num_clients", self.num_clients.to_string());
        push("clients_per_round", self.resolved_clients_per_round().to_string());
        push("participation", fmt_f64(self.resolved_participation()));
        push("rounds", self.rounds.to_string());
        push("local_steps", self.local_steps.to_string());
        push("sample_rate", fmt_f64(self.sample_rate));
        push("clip", fmt_f64(self.clip));
        push("sigma", fmt_f64(self.sigma));
        push("delta", fmt_f64(self.delta));
        push("lr", fmt_f64(self.lr));
        push("weight_decay", fmt_f64(self.weight_decay));
        push("gamma", fmt_f64(self.gamma));
        push("beta1", fmt_f64(self.beta1));
        push("beta2", fmt_f64(self.beta2));
        push("eps_adam", fmt_f64(self.eps_adam));
        push("aggregation", self.aggregation.as_str().into());
        push("bias_correction", self.bias_correction.to_string());
        push("strict_alg1", self.strict_alg1.to_string());
        push(
            "preconditioner",
            if self.identity_preconditioner { "identity" } else { "adaptive" }.into(),
        );
        push("hist_bins", self.hist_bins.to_string());
        push("hist_m_range", fmt_f64(self.hist_m_range));
        push("hist_sqrt_v_max", fmt_f64(self.hist_sqrt_v_max));
        push("seed", self.seed.to_string());
        out
    }

    /// Hex SHA-256 of the canonical semantic text. Execution mode and output
    /// location do not affect results and are excluded.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_text().as_bytes());
        hasher
            .finalize()
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    pub fn canonical_text(&self) -> String {
        self.semantic_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
