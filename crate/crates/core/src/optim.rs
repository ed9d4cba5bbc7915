//! Client-side local optimizers: DP-AdamW with block warm start, DP bias
//! correction and global alignment, plus the DP-LocalAdamW and DP-FedAvg
//! baselines.

use serde::{Deserialize, Serialize};

use crate::dp::DPConfig;
use crate::error::{config_err, ensure_dim, Error, Result};
use crate::param::{broadcast_blocks, BlockStats, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerVariant {
    DpFedAdamW,
    DpLocalAdamW,
    DpFedAvgSgd,
}

impl OptimizerVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DpFedAdamW => "dp_fedadamw",
            Self::DpLocalAdamW => "dp_local_adamw",
            Self::DpFedAvgSgd => "dp_fedavg_sgd",
        }
    }

    pub fn is_adaptive(self) -> bool {
        !matches!(self, Self::DpFedAvgSgd)
    }
}

impl std::str::FromStr for OptimizerVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dp_fedadamw" => Ok(Self::DpFedAdamW),
            "dp_local_adamw" => Ok(Self::DpLocalAdamW),
            "dp_fedavg_sgd" => Ok(Self::DpFedAvgSgd),
            other => config_err(format!("unknown variant '{other}'")),
        }
    }
}

impl std::fmt::Display for OptimizerVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// AdamW hyperparameters shared by every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Coefficient of the global alignment direction.
    pub gamma: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            gamma: 0.5,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config_err("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return config_err(format!("adam epsilon must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return config_err("weight decay must be >= 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return config_err("alignment coefficient must be >= 0");
        }
        Ok(())
    }
}

/// Switches that turn DP-FedAdamW components on and off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdamWOptions {
    /// Subtract `(σC/(sR))²` from `v̂` before the square root.
    pub dp_bias_correction: bool,
    /// Divide a warm-started `v` by `1−β₂ᵏ` exactly as in the reference
    /// algorithm. When false, a warm-started `v` is used without the
    /// initialisation-bias division.
    pub strict_alg1: bool,
    /// Replace the adaptive preconditioner with the identity (ablation only).
    pub identity_preconditioner: bool,
}

impl Default for AdamWOptions {
    fn default() -> Self {
        Self {
            dp_bias_correction: true,
            strict_alg1: true,
            identity_preconditioner: false,
        }
    }
}

/// One client's AdamW state for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct DPAdamWState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub k: u64,
    pub hyper: AdamWHyper,
    warm_started: bool,
}

impl DPAdamWState {
    pub fn new(dim: usize, hyper: AdamWHyper) -> Self {
        Self {
            m: ParamVector::zeros(dim),
            v: ParamVector::zeros(dim),
            k: 0,
            hyper,
            warm_started: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    pub fn is_warm_started(&self) -> bool {
        self.warm_started
    }

    /// Resets `m` and `k`; `v` becomes the broadcast block means for
    /// DP-FedAdamW (when given) and zero otherwise.
    pub fn init_round(&mut self, variant: OptimizerVariant, warm_start: Option<&BlockStats>) -> Result<()> {
        let dim = self.dim();
        self.m = ParamVector::zeros(dim);
        self.k = 0;
        self.warm_started = false;
        self.v = match (variant, warm_start) {
            (OptimizerVariant::DpFedAdamW, Some(stats)) => {
                ensure_dim(dim, stats.layout().dim())?;
                if stats.values().iter().any(|&x| !(x >= 0.0)) {
                    return Err(Error::Contract("warm-start block means must be >= 0".into()));
                }
                self.warm_started = !stats.is_zero();
                broadcast_blocks(stats)
            }
            _ => ParamVector::zeros(dim),
        };
        Ok(())
    }

    /// Advances `k` and the moment EMAs, returning `(m̂, v̂)`.
    pub fn moment_update(&mut self, g: &ParamVector, options: &AdamWOptions) -> Result<(ParamVector, ParamVector)> {
        ensure_dim(self.dim(), g.dim())?;
        self.k += 1;
        let AdamWHyper { beta1, beta2, .. } = self.hyper;
        for ((m, v), &gi) in self
            .m
            .as_mut_slice()
            .iter_mut()
            .zip(self.v.as_mut_slice().iter_mut())
            .zip(g.iter())
        {
            *m = beta1 * *m + (1.0 - beta1) * gi;
            *v = beta2 * *v + (1.0 - beta2) * gi * gi;
        }
        Ok(self.bias_corrected(options))
    }

    /// `(m/(1−β₁ᵏ), v/(1−β₂ᵏ))` at the current step.
    pub fn bias_corrected(&self, options: &AdamWOptions) -> (ParamVector, ParamVector) {
        assert!(self.k >= 1, "bias correction needs k >= 1");
        let k = i32::try_from(self.k).unwrap_or(i32::MAX);
        let c1 = 1.0 - self.hyper.beta1.powi(k);
        let c2 = 1.0 - self.hyper.beta2.powi(k);
        let m_hat = ParamVector::from_vec_unchecked(self.m.iter().map(|m| m / c1).collect());
        let v_hat = if self.warm_started && !options.strict_alg1 {
            self.v.clone()
        } else {
            ParamVector::from_vec_unchecked(self.v.iter().map(|v| v / c2).collect())
        };
        (m_hat, v_hat)
    }

    /// One DP-FedAdamW local step from the privatised gradient `g`:
    ///
    /// `θ' = θ − η(m̂⊙ϑ + γΔ_G) − ηλθ`.
    ///
    /// `bc_shift` is the variance subtracted inside the preconditioner
    /// (zero disables the DP bias correction).
    pub fn local_step(
        &mut self,
        g: &ParamVector,
        delta_g: &ParamVector,
        theta: &ParamVector,
        bc_shift: f64,
        options: &AdamWOptions,
    ) -> Result<ParamVector> {
        ensure_dim(self.dim(), theta.dim())?;
        ensure_dim(self.dim(), delta_g.dim())?;
        let (m_hat, v_hat) = self.moment_update(g, options)?;
        let AdamWHyper {
            lr,
            eps,
            weight_decay,
            gamma,
            ..
        } = self.hyper;
        let precond = if options.identity_preconditioner {
            ParamVector::filled(self.dim(), 1.0)
        } else {
            preconditioner_with_shift(&v_hat, bc_shift, eps)
        };
        let out: Vec<f64> = (0..self.dim())
            .map(|j| {
                let mut dir = m_hat[j] * precond[j];
                if gamma != 0.0 {
                    dir += gamma * delta_g[j];
                }
                theta[j] - lr * dir - lr * weight_decay * theta[j]
            })
            .collect();
        let out = ParamVector::from_vec_unchecked(out);
        out.ensure_finite("local AdamW step")?;
        Ok(out)
    }
}

/// `ϑ = 1/(√max(v̂ − (σC/(sR))², 0) + ε)`.
pub fn corrected_preconditioner(v_hat: &ParamVector, cfg: &DPConfig, eps: f64) -> ParamVector {
    preconditioner_with_shift(v_hat, cfg.noise_variance(), eps)
}

/// `1/(√max(v̂ − shift, 0) + ε)`; with `shift == 0` this is the plain AdamW
/// preconditioner `1/(√v̂ + ε)`.
pub fn preconditioner_with_shift(v_hat: &ParamVector, shift: f64, eps: f64) -> ParamVector {
    let out = v_hat
        .iter()
        .map(|&v| {
            let arg = if shift == 0.0 { v } else { (v - shift).max(0.0) };
            1.0 / (arg.sqrt() + eps)
        })
        .collect();
    ParamVector::from_vec_unchecked(out)
}

/// `θ' = θ − ηg − ηλθ`.
pub fn sgd_local_step(theta: &ParamVector, g: &ParamVector, lr: f64, weight_decay: f64) -> Result<ParamVector> {
    ensure_dim(theta.dim(), g.dim())?;
    let out: Vec<f64> = theta
        .iter()
        .zip(g.iter())
        .map(|(t, gi)| t - lr * gi - lr * weight_decay * t)
        .collect();
    let out = ParamVector::from_vec_unchecked(out);
    out.ensure_finite("local SGD step")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::BlockLayout;
    use std::sync::Arc;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn hyper() -> AdamWHyper {
        AdamWHyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            gamma: 0.0,
        }
    }

    #[test]
    fn init_round_variants() {
        let layout = Arc::new(BlockLayout::from_sizes([("a", 2), ("b", 2)]).unwrap());
        let vbar = BlockStats::new(vec![1.5, 3.5], layout.clone()).unwrap();
        let mut s = DPAdamWState::new(4, hyper());
        s.m = pv(&[1.0; 4]);
        s.k = 7;
        s.init_round(OptimizerVariant::DpFedAdamW, Some(&vbar)).unwrap();
        assert_eq!(s.v.as_slice(), &[1.5, 1.5, 3.5, 3.5]);
        assert_eq!(s.m, ParamVector::zeros(4));
        assert_eq!(s.k, 0);
        assert!(s.is_warm_started());

        s.init_round(OptimizerVariant::DpFedAdamW, Some(&BlockStats::zeros(layout.clone()))).unwrap();
        assert_eq!(s.v, ParamVector::zeros(4));
        assert!(!s.is_warm_started());

        s.init_round(OptimizerVariant::DpLocalAdamW, Some(&vbar)).unwrap();
        assert_eq!(s.v, ParamVector::zeros(4));

        let bad = BlockStats::new(vec![-1.0, 0.0], layout).unwrap();
        assert!(s.init_round(OptimizerVariant::DpFedAdamW, Some(&bad)).is_err());
    }

    #[test]
    fn first_step_bias_correction_is_exact() {
        let opts = AdamWOptions::default();
        let g = pv(&[0.3, -1.7, 2.5e-3]);
        let mut s = DPAdamWState::new(3, hyper());
        let (m_hat, v_hat) = s.moment_update(&g, &opts).unwrap();
        for j in 0..3 {
            assert!((m_hat[j] - g[j]).abs() <= 4.0 * f64::EPSILON * g[j].abs());
            assert!((v_hat[j] - g[j] * g[j]).abs() <= 4.0 * f64::EPSILON * g[j] * g[j]);
        }
        assert_eq!(s.k, 1);
    }

    #[test]
    fn constant_gradient_limit() {
        let opts = AdamWOptions::default();
        let g = pv(&[0.5, -2.0]);
        let mut s = DPAdamWState::new(2, hyper());
        let mut last = (ParamVector::zeros(2), ParamVector::zeros(2));
        for _ in 0..20_000 {
            last = s.moment_update(&g, &opts).unwrap();
        }
        for j in 0..2 {
            assert!((last.0[j] - g[j]).abs() < 1e-9);
            assert!((last.1[j] - g[j] * g[j]).abs() < 1e-8);
        }
    }

    #[test]
    #[should_panic(expected = "k >= 1")]
    fn bias_correction_before_any_step_panics() {
        let s = DPAdamWState::new(2, hyper());
        let _ = s.bias_corrected(&AdamWOptions::default());
    }

    #[test]
    fn preconditioner_cases() {
        let eps = 1e-8;
        // σ=1, C=0.1, sR=10 ⇒ shift 1e-4
        let cfg = DPConfig::new(0.1, 1.0, 0.1, 100).unwrap();
        let shift = cfg.noise_variance();
        let at_shift = corrected_preconditioner(&pv(&[shift]), &cfg, eps);
        assert_eq!(at_shift[0], 1.0 / eps);
        let below = corrected_preconditioner(&pv(&[shift / 2.0]), &cfg, eps);
        assert_eq!(below[0], 1.0 / eps);
        let p = corrected_preconditioner(&pv(&[0.0101]), &cfg, eps);
        assert!((p[0] - 1.0 / (0.1 + eps)).abs() < 1e-12);

        let no_noise = DPConfig::new(0.1, 0.0, 0.1, 100).unwrap();
        let v = pv(&[0.0, 1e-6, 3.0]);
        let a = corrected_preconditioner(&v, &no_noise, eps);
        for j in 0..3 {
            assert_eq!(a[j], 1.0 / (v[j].sqrt() + eps));
        }
    }

    #[test]
    fn pure_decay_step() {
        let mut s = DPAdamWState::new(2, AdamWHyper { weight_decay: 0.1, ..hyper() });
        let theta = pv(&[2.0, -4.0]);
        let out = s
            .local_step(&ParamVector::zeros(2), &ParamVector::zeros(2), &theta, 0.0, &AdamWOptions::default())
            .unwrap();
        let shrink = 1.0 - 0.01 * 0.1;
        assert!((out[0] - shrink * 2.0).abs() < 1e-15);
        assert!((out[1] + shrink * 4.0).abs() < 1e-15);
    }

    #[test]
    fn plain_adamw_step_without_extras() {
        let opts = AdamWOptions::default();
        let mut s = DPAdamWState::new(2, hyper());
        let theta = pv(&[1.0, 1.0]);
        let g = pv(&[0.2, -0.4]);
        let out = s.local_step(&g, &pv(&[9.0, 9.0]), &theta, 0.0, &opts).unwrap();
        // first step: m̂ = g, v̂ = g², so the update is lr * g/(|g| + eps)
        for j in 0..2 {
            let expect = theta[j] - 0.01 * (g[j] / (g[j].abs() + 1e-8));
            assert!((out[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_step_cases() {
        let theta = pv(&[1.0, -2.0]);
        assert_eq!(sgd_local_step(&theta, &ParamVector::zeros(2), 0.1, 0.0).unwrap(), theta);
        assert_eq!(sgd_local_step(&theta, &pv(&[5.0, 5.0]), 0.0, 0.0).unwrap(), theta);
        let out = sgd_local_step(&theta, &pv(&[1.0, 1.0]), 0.5, 0.0).unwrap();
        assert_eq!(out.as_slice(), &[0.5, -2.5]);
    }

    #[test]
    fn sgd_decreases_convex_quadratic() {
        // f(θ) = ½ Σ D_j θ_j², gradient D⊙θ
        let d = [1.0, 4.0, 0.25];
        let mut theta = pv(&[1.0, -1.0, 3.0]);
        let f = |t: &ParamVector| 0.5 * (0..3).map(|j| d[j] * t[j] * t[j]).sum::<f64>();
        let mut prev = f(&theta);
        for _ in 0..100 {
            let g = pv(&[d[0] * theta[0], d[1] * theta[1], d[2] * theta[2]]);
            theta = sgd_local_step(&theta, &g, 0.1, 0.0).unwrap();
            let cur = f(&theta);
            assert!(cur <= prev);
            prev = cur;
        }
    }

    #[test]
    fn non_strict_warm_start_skips_init_division() {
        let layout = Arc::new(BlockLayout::single(2).unwrap());
        let vbar = BlockStats::new(vec![0.25], layout).unwrap();
        let strict = AdamWOptions::default();
        let loose = AdamWOptions { strict_alg1: false, ..strict };
        let g = pv(&[0.5, 0.5]);
        let mut a = DPAdamWState::new(2, hyper());
        a.init_round(OptimizerVariant::DpFedAdamW, Some(&vbar)).unwrap();
        let mut b = a.clone();
        let (_, va) = a.moment_update(&g, &strict).unwrap();
        let (_, vb) = b.moment_update(&g, &loose).unwrap();
        assert!((vb[0] - 0.25).abs() < 1e-15);
        assert!((va[0] - 0.25 / 0.001).abs() < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn preconditioner_is_bounded(v in 0.0f64..1e3, shift in 0.0f64..1e3, eps in 1e-10f64..1.0) {
                let p = preconditioner_with_shift(&pv(&[v]), shift, eps)[0];
                prop_assert!(p > 0.0 && p <= 1.0 / eps);
            }

            #[test]
            fn v_stays_nonnegative(gs in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..30)) {
                let mut s = DPAdamWState::new(3, hyper());
                for g in gs {
                    s.moment_update(&pv(&g), &AdamWOptions::default()).unwrap();
                    prop_assert!(s.v.iter().all(|&x| x >= 0.0));
                }
            }
        }
    }
}
