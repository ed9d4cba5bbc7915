//! Rényi-DP accounting for the (subsampled) Gaussian mechanism.
//!
//! Composition is additive per order; conversion to `(ε, δ)` uses
//! `ε = min_ζ [RDP(ζ) + log(1/δ)/(ζ−1)]` over a fixed order grid.
//!
//! Fixed-size local batches are accounted as Poisson subsampling at rate
//! `q = s`. This is the usual DP-SGD approximation, not a proven bound for
//! sampling without replacement.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// `{1.25, 1.5, 1.75, 2, 3, …, 64, 128, 256, 512}`.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((2..=64).map(f64::from));
    orders.extend([128.0, 256.0, 512.0]);
    orders
}

/// RDP of the Gaussian mechanism with sensitivity 1 and noise multiplier
/// `σ`: `ζ/(2σ²)`.
pub fn gaussian_rdp(order: f64, sigma: f64) -> Result<f64> {
    if !(order > 1.0) || !(sigma > 0.0) {
        return config_err(format!("gaussian_rdp needs order > 1 and sigma > 0 (got {order}, {sigma})"));
    }
    Ok(order / (2.0 * sigma * sigma))
}

fn log_add(a: f64, b: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// RDP at integer order `α ≥ 2` of the Poisson-subsampled Gaussian
/// mechanism, via the binomial expansion
/// `A_α = Σ_i C(α,i)(1−q)^{α−i} q^i exp((i²−i)/(2σ²))`, `RDP = log A_α/(α−1)`.
pub fn subsampled_gaussian_rdp_int(order: u32, sigma: f64, q: f64) -> Result<f64> {
    if order < 2 {
        return config_err(format!("integer order must be >= 2, got {order}"));
    }
    if !(sigma > 0.0) || !(q > 0.0 && q <= 1.0) {
        return config_err(format!("need sigma > 0 and q in (0, 1] (got {sigma}, {q})"));
    }
    let alpha = f64::from(order);
    if q == 1.0 {
        return gaussian_rdp(alpha, sigma);
    }
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let mut log_binom = 0.0; // log C(α, 0)
    let mut log_a = f64::NEG_INFINITY;
    for i in 0..=order {
        let fi = f64::from(i);
        let term = log_binom + fi * log_q + (alpha - fi) * log_1mq + (fi * fi - fi) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
        log_binom += (alpha - fi).ln() - (fi + 1.0).ln();
    }
    // A_α ≥ 1 mathematically; clamp round-off below zero.
    Ok((log_a / (alpha - 1.0)).max(0.0))
}

/// RDP of the subsampled Gaussian at any order `> 1`.
///
/// Integer orders use the exact binomial expansion. Fractional orders are
/// bounded by the next integer order, which is valid because Rényi
/// divergence is non-decreasing in the order.
pub fn subsampled_gaussian_rdp(order: f64, sigma: f64, q: f64) -> Result<f64> {
    if !(order > 1.0) || !order.is_finite() {
        return config_err(format!("order must be finite and > 1, got {order}"));
    }
    if q == 1.0 {
        return gaussian_rdp(order, sigma);
    }
    let int_order = order.ceil().max(2.0);
    let int_order = u32::try_from(int_order as u64).map_err(|_| Error::Config("order too large".into()))?;
    subsampled_gaussian_rdp_int(int_order, sigma, q)
}

/// `steps` applications of a Gaussian mechanism with noise multiplier `σ` on
/// a `q`-subsample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyEvent {
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon: f64,
    pub delta: f64,
}

/// Accumulated mechanism applications.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    events: Vec<PrivacyEvent>,
    orders: Vec<f64>,
}

impl Default for PrivacyLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self {
            events: Vec::new(),
            orders: default_orders(),
        }
    }

    pub fn with_orders(orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() || orders.iter().any(|&o| !(o > 1.0) || !o.is_finite()) {
            return config_err("order grid must be non-empty with finite orders > 1");
        }
        Ok(Self {
            events: Vec::new(),
            orders,
        })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn events(&self) -> &[PrivacyEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.iter().all(|e| e.steps == 0)
    }

    /// Records `steps` more applications. Events with bitwise-equal `(σ, q)`
    /// are merged, so splitting a run into pieces never changes `ε`.
    pub fn record(&mut self, sigma: f64, q: f64, steps: u64) -> Result<()> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return config_err(format!("accounted events need sigma > 0, got {sigma}"));
        }
        if !(q > 0.0 && q <= 1.0) {
            return config_err(format!("sampling rate must be in (0, 1], got {q}"));
        }
        match self
            .events
            .iter_mut()
            .find(|e| e.sigma.to_bits() == sigma.to_bits() && e.q.to_bits() == q.to_bits())
        {
            Some(e) => e.steps += steps,
            None => self.events.push(PrivacyEvent { sigma, q, steps }),
        }
        Ok(())
    }

    /// Total RDP at every grid order.
    pub fn rdp_curve(&self) -> Result<Vec<f64>> {
        self.orders
            .iter()
            .map(|&order| {
                self.events.iter().try_fold(0.0, |acc, e| {
                    Ok(acc + e.steps as f64 * subsampled_gaussian_rdp(order, e.sigma, e.q)?)
                })
            })
            .collect()
    }

    /// `(ε, δ)` from the composed RDP curve. An empty ledger costs nothing.
    pub fn compose_and_convert(&self, delta: f64) -> Result<Budget> {
        if !(delta > 0.0 && delta < 1.0) {
            return config_err(format!("delta must be in (0, 1), got {delta}"));
        }
        if self.is_empty() {
            return Ok(Budget { epsilon: 0.0, delta });
        }
        let log_inv_delta = (1.0 / delta).ln();
        let epsilon = self
            .orders
            .iter()
            .zip(self.rdp_curve()?)
            .map(|(&order, rdp)| rdp + log_inv_delta / (order - 1.0))
            .fold(f64::INFINITY, f64::min);
        Ok(Budget { epsilon, delta })
    }
}

/// Third-party `ε` in its asymptotic form with the hidden constant set to 1:
/// `s·√(TK·log(2/δ)·log(2T/δ))/σ`. A reference number, not a tight bound.
pub fn third_party_epsilon(sample_rate: f64, rounds: u64, local_steps: u64, delta: f64, sigma: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) || !(sigma > 0.0) || !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return config_err("third_party_epsilon needs delta in (0,1), sigma > 0, s in (0,1]");
    }
    if rounds == 0 {
        return Ok(0.0);
    }
    let t = rounds as f64;
    let k = local_steps as f64;
    Ok(sample_rate * (t * k * (2.0 / delta).ln() * (2.0 * t / delta).ln()).sqrt() / sigma)
}

/// Accumulated budget towards the server when a fraction `l` of `N` clients
/// participates per round: `ε_s = ε√(N/l)`, `δ_s = (δ/2)(1/l + 1)`.
pub fn server_budget(epsilon: f64, delta: f64, num_clients: usize, participation: f64) -> Result<Budget> {
    if !(participation > 0.0 && participation <= 1.0) {
        return config_err(format!("participation rate must be in (0, 1], got {participation}"));
    }
    if !(epsilon >= 0.0) || !(delta > 0.0 && delta < 1.0) || num_clients == 0 {
        return config_err("server_budget needs epsilon >= 0, delta in (0,1), N >= 1");
    }
    Ok(Budget {
        epsilon: epsilon * (num_clients as f64 / participation).sqrt(),
        delta: delta / 2.0 * (1.0 / participation + 1.0),
    })
}
