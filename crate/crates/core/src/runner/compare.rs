//! Paired-seed ablation tables. Every arm runs on the same seeds, so row `i`
//! of two arms differ only in the declared axes.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::{fmt_float, run_in_memory, RunConfig};
use crate::error::{config_err, Error, Result};

/// Keys a comparison may vary.
pub const ABLATION_AXES: &[&str] = &[
    "variant",
    "gamma",
    "aggregation",
    "bias_correction",
    "strict_alg1",
    "preconditioner",
    "sigma",
    "lr",
    "weight_decay",
    "beta2",
    "eps_adam",
    "local_steps",
    "alpha",
    "heterogeneity",
];

/// A named set of overrides on a base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl Arm {
    pub fn new(label: impl Into<String>, overrides: &[(&str, &str)]) -> Self {
        Self {
            label: label.into(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// Built-in sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// `γ ∈ {0, 0.25, 0.5, 0.75, 1}`.
    GammaGrid,
    /// Leave-one-out over aggregation, bias correction and alignment, plus
    /// the full method.
    Components,
    /// No aggregation, full `v`, block means.
    Aggregation,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Self::GammaGrid),
            "components" => Ok(Self::Components),
            "aggregation" => Ok(Self::Aggregation),
            other => config_err(format!("unknown preset '{other}' (gamma, components, aggregation)")),
        }
    }
}

impl Preset {
    pub fn axes(self) -> Vec<&'static str> {
        match self {
            Self::GammaGrid => vec!["gamma"],
            Self::Components => vec!["aggregation", "bias_correction", "gamma"],
            Self::Aggregation => vec!["aggregation"],
        }
    }

    pub fn arms(self) -> Vec<Arm> {
        match self {
            Self::GammaGrid => ["0", "0.25", "0.5", "0.75", "1.0"]
                .iter()
                .map(|g| Arm::new(format!("gamma={g}"), &[("gamma", g)]))
                .collect(),
            Self::Components => vec![
                Arm::new("w/o Agg", &[("aggregation", "none")]),
                Arm::new("w/o BC", &[("bias_correction", "false")]),
                Arm::new("w/o Align", &[("gamma", "0")]),
                Arm::new("full", &[]),
            ],
            Self::Aggregation => ["none", "full", "block_mean"]
                .iter()
                .map(|a| Arm::new(*a, &[("aggregation", a)]))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub arm: String,
    pub seed: u64,
    pub final_loss: f64,
    pub final_acc: Option<f64>,
    pub eps_rdp: Option<f64>,
    /// Round averages; `NaN` when undefined (fewer than two clients per round
    /// or zero rounds).
    pub mean_var_v: f64,
    pub mean_drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub axes: Vec<String>,
    pub arms: Vec<String>,
    pub seeds: Vec<u64>,
    /// Arm-major, then seed order.
    pub rows: Vec<ComparisonRow>,
}

/// `(mean, sample std)`; std is 0 for a single value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

impl ComparisonTable {
    pub fn rows_for<'a>(&'a self, arm: &'a str) -> impl Iterator<Item = &'a ComparisonRow> + 'a {
        self.rows.iter().filter(move |r| r.arm == arm)
    }

    pub fn per_seed_csv(&self) -> String {
        let mut out = String::from("arm,seed,final_loss,final_acc,eps_rdp,mean_var_v,mean_drift\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.arm,
                r.seed,
                fmt_float(r.final_loss),
                opt(r.final_acc),
                opt(r.eps_rdp),
                fmt_float(r.mean_var_v),
                fmt_float(r.mean_drift)
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "arm,n,final_loss_mean,final_loss_std,final_acc_mean,final_acc_std,mean_drift_mean,mean_var_v_mean\n",
        );
        for arm in &self.arms {
            let rows: Vec<&ComparisonRow> = self.rows_for(arm).collect();
            let loss: Vec<f64> = rows.iter().map(|r| r.final_loss).collect();
            let acc: Vec<f64> = rows.iter().filter_map(|r| r.final_acc).collect();
            let drift: Vec<f64> = rows.iter().map(|r| r.mean_drift).collect();
            let var_v: Vec<f64> = rows.iter().map(|r| r.mean_var_v).collect();
            let (lm, ls) = mean_std(&loss);
            let (am, asd) = if acc.is_empty() { (None, None) } else {
                let (m, s) = mean_std(&acc);
                (Some(m), Some(s))
            };
            out.push_str(&format!(
                "{arm},{},{},{},{},{},{},{}\n",
                rows.len(),
                fmt_float(lm),
                fmt_float(ls),
                opt(am),
                opt(asd),
                fmt_float(mean_std(&drift).0),
                fmt_float(mean_std(&var_v).0)
            ));
        }
        out
    }

    /// Writes `comparison.csv` (per seed) and `comparison_summary.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("comparison.csv"), self.per_seed_csv())?;
        fs::write(dir.join("comparison_summary.csv"), self.summary_csv())?;
        Ok(())
    }
}

fn finite_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs every arm on every seed.
///
/// Fails with a mismatched-axes error if an arm touches a key outside `axes`
/// or if `axes` names a key that is not an ablation axis.
pub fn compare(base: &RunConfig, axes: &[&str], arms: &[Arm], seeds: &[u64]) -> Result<ComparisonTable> {
    if arms.is_empty() || seeds.is_empty() {
        return config_err("compare needs at least one arm and one seed");
    }
    for a in axes {
        if !ABLATION_AXES.contains(a) {
            return config_err(format!("mismatched axes: '{a}' is not an ablation axis"));
        }
    }
    let mut labels = BTreeSet::new();
    let mut configs = Vec::with_capacity(arms.len());
    for arm in arms {
        if !labels.insert(arm.label.as_str()) {
            return config_err(format!("duplicate arm label '{}'", arm.label));
        }
        if let Some((k, _)) = arm.overrides.iter().find(|(k, _)| !axes.contains(&k.as_str())) {
            return config_err(format!(
                "mismatched axes: arm '{}' sets '{k}', declared axes are {axes:?}",
                arm.label
            ));
        }
        let cfg = arm.apply(base)?;
        cfg.validate()?;
        configs.push(cfg);
    }

    let mut rows = Vec::with_capacity(arms.len() * seeds.len());
    for (arm, cfg) in arms.iter().zip(&configs) {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let r = run_in_memory(&c)?;
            rows.push(ComparisonRow {
                arm: arm.label.clone(),
                seed,
                final_loss: r.summary.final_loss,
                final_acc: r.summary.final_acc,
                eps_rdp: r.summary.eps_rdp,
                mean_var_v: finite_mean(r.records.iter().map(|m| m.var_v)),
                mean_drift: finite_mean(r.records.iter().map(|m| m.drift)),
            });
        }
    }
    Ok(ComparisonTable {
        axes: axes.iter().map(|s| s.to_string()).collect(),
        arms: arms.iter().map(|a| a.label.clone()).collect(),
        seeds: seeds.to_vec(),
        rows,
    })
}
