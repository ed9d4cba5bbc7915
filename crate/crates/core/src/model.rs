//! Desk-scale differentiable models with exact per-sample gradients.
//!
//! Parameters are packed into one flat [`ParamVector`]; the model's
//! [`BlockLayout`] names the tensors inside it (one block per tensor).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, ensure_dim, Error, Result};
use crate::param::{BlockLayout, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    /// Quadratic samples carry their target in `features`.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Label,
}

impl Sample {
    pub fn classified(features: Vec<f64>, class: usize) -> Self {
        Self {
            features,
            label: Label::Class(class),
        }
    }

    pub fn point(features: Vec<f64>) -> Self {
        Self {
            features,
            label: Label::None,
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Quadratic,
    Logistic,
    Mlp2,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Quadratic => "quadratic",
            Self::Logistic => "logistic",
            Self::Mlp2 => "mlp2",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "logistic" => Ok(Self::Logistic),
            "mlp2" => Ok(Self::Mlp2),
            other => config_err(format!("unknown model kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    /// `f(θ; x) = ½ Σ_j D_j (θ_j − x_j)²`. A client's samples scatter around
    /// its center, so its expected loss is `½(θ−a)ᵀD(θ−a)` plus a constant.
    Quadratic { curvature: Vec<f64> },
    /// Multinomial logistic regression: `W` is `classes × features`, then `b`.
    Logistic { features: usize, classes: usize },
    /// One tanh hidden layer followed by a linear softmax layer.
    Mlp2 {
        features: usize,
        hidden: usize,
        classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    layout: Arc<BlockLayout>,
}

impl Model {
    /// Quadratic with diagonal curvature `curvature` split into `blocks`
    /// near-equal contiguous blocks.
    pub fn quadratic(curvature: Vec<f64>, blocks: usize) -> Result<Self> {
        let d = curvature.len();
        if d == 0 {
            return config_err("quadratic model needs d >= 1");
        }
        if curvature.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return config_err("quadratic curvature must be positive and finite");
        }
        if blocks == 0 || blocks > d {
            return config_err(format!("quadratic blocks must be in 1..={d}"));
        }
        let sizes = (0..blocks).map(|b| {
            let lo = b * d / blocks;
            let hi = (b + 1) * d / blocks;
            (format!("theta{b}"), hi - lo)
        });
        let layout = Arc::new(BlockLayout::from_sizes(sizes)?);
        Ok(Self {
            arch: Architecture::Quadratic { curvature },
            layout,
        })
    }

    pub fn logistic(features: usize, classes: usize) -> Result<Self> {
        if features == 0 || classes < 2 {
            return config_err("logistic model needs features >= 1 and classes >= 2");
        }
        let layout = Arc::new(BlockLayout::from_sizes([
            ("weights", classes * features),
            ("bias", classes),
        ])?);
        Ok(Self {
            arch: Architecture::Logistic { features, classes },
            layout,
        })
    }

    pub fn mlp2(features: usize, hidden: usize, classes: usize) -> Result<Self> {
        if features == 0 || hidden == 0 || classes < 2 {
            return config_err("mlp2 needs features, hidden >= 1 and classes >= 2");
        }
        let layout = Arc::new(BlockLayout::from_sizes([
            ("W1", hidden * features),
            ("b1", hidden),
            ("W2", classes * hidden),
            ("b2", classes),
        ])?);
        Ok(Self {
            arch: Architecture::Mlp2 {
                features,
                hidden,
                classes,
            },
            layout,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.arch {
            Architecture::Quadratic { .. } => ModelKind::Quadratic,
            Architecture::Logistic { .. } => ModelKind::Logistic,
            Architecture::Mlp2 { .. } => ModelKind::Mlp2,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.arch {
            Architecture::Quadratic { .. } => None,
            Architecture::Logistic { classes, .. } | Architecture::Mlp2 { classes, .. } => {
                Some(classes)
            }
        }
    }

    /// Entries i.i.d. uniform in [−0.1, 0.1].
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let v = (0..self.dim())
            .map(|_| rng.random_range(-0.1..=0.1))
            .collect();
        ParamVector::from_vec_unchecked(v)
    }

    fn check(&self, theta: &ParamVector, sample: &Sample) -> Result<()> {
        ensure_dim(self.dim(), theta.dim())?;
        match &self.arch {
            Architecture::Quadratic { curvature } => ensure_dim(curvature.len(), sample.features.len()),
            Architecture::Logistic { features, classes }
            | Architecture::Mlp2 {
                features, classes, ..
            } => {
                ensure_dim(*features, sample.features.len())?;
                match sample.label {
                    Label::Class(c) if c < *classes => Ok(()),
                    Label::Class(c) => Err(Error::Contract(format!(
                        "label {c} out of range for {classes} classes"
                    ))),
                    Label::None => Err(Error::Contract("classifier sample without a label".into())),
                }
            }
        }
    }

    pub fn loss(&self, theta: &ParamVector, sample: &Sample) -> Result<f64> {
        self.check(theta, sample)?;
        Ok(self.forward(theta.as_slice(), sample).loss)
    }

    /// Exact gradient of [`Model::loss`] for a single sample.
    pub fn per_sample_grad(&self, theta: &ParamVector, sample: &Sample) -> Result<ParamVector> {
        self.check(theta, sample)?;
        Ok(self.loss_and_grad_unchecked(theta.as_slice(), sample).1)
    }

    pub fn loss_and_grad(&self, theta: &ParamVector, sample: &Sample) -> Result<(f64, ParamVector)> {
        self.check(theta, sample)?;
        Ok(self.loss_and_grad_unchecked(theta.as_slice(), sample))
    }

    /// Predicted class (argmax of logits); `None` for the quadratic model.
    pub fn predict(&self, theta: &ParamVector, sample: &Sample) -> Result<Option<usize>> {
        self.check(theta, sample)?;
        Ok(self.forward(theta.as_slice(), sample).logits.map(|z| argmax(&z)))
    }

    fn forward(&self, theta: &[f64], sample: &Sample) -> Forward {
        let x = &sample.features;
        match &self.arch {
            Architecture::Quadratic { curvature } => {
                let loss = 0.5
                    * curvature
                        .iter()
                        .zip(theta.iter().zip(x))
                        .map(|(d, (t, a))| d * (t - a) * (t - a))
                        .sum::<f64>();
                Forward {
                    loss,
                    logits: None,
                    hidden: None,
                }
            }
            Architecture::Logistic { features, classes } => {
                let (w, b) = theta.split_at(classes * features);
                let z = affine(w, b, x, *classes);
                Forward {
                    loss: cross_entropy(&z, sample.class().unwrap_or(0)),
                    logits: Some(z),
                    hidden: None,
                }
            }
            Architecture::Mlp2 {
                features,
                hidden,
                classes,
            } => {
                let (w1, rest) = theta.split_at(hidden * features);
                let (b1, rest) = rest.split_at(*hidden);
                let (w2, b2) = rest.split_at(classes * hidden);
                let h: Vec<f64> = affine(w1, b1, x, *hidden).into_iter().map(f64::tanh).collect();
                let z = affine(w2, b2, &h, *classes);
                Forward {
                    loss: cross_entropy(&z, sample.class().unwrap_or(0)),
                    logits: Some(z),
                    hidden: Some(h),
                }
            }
        }
    }

    fn loss_and_grad_unchecked(&self, theta: &[f64], sample: &Sample) -> (f64, ParamVector) {
        let x = &sample.features;
        let fwd = self.forward(theta, sample);
        let mut grad = vec![0.0; theta.len()];
        match &self.arch {
            Architecture::Quadratic { curvature } => {
                for (j, g) in grad.iter_mut().enumerate() {
                    *g = curvature[j] * (theta[j] - x[j]);
                }
            }
            Architecture::Logistic { features, classes } => {
                let dz = softmax_minus_onehot(fwd.logits.as_deref().unwrap(), sample.class().unwrap_or(0));
                let (gw, gb) = grad.split_at_mut(classes * features);
                outer_into(gw, &dz, x);
                gb.copy_from_slice(&dz);
            }
            Architecture::Mlp2 {
                features,
                hidden,
                classes,
            } => {
                let h = fwd.hidden.as_deref().unwrap();
                let dz = softmax_minus_onehot(fwd.logits.as_deref().unwrap(), sample.class().unwrap_or(0));
                let w2 = &theta[hidden * features + hidden..hidden * features + hidden + classes * hidden];
                let (gw1, rest) = grad.split_at_mut(hidden * features);
                let (gb1, rest) = rest.split_at_mut(*hidden);
                let (gw2, gb2) = rest.split_at_mut(classes * hidden);
                outer_into(gw2, &dz, h);
                gb2.copy_from_slice(&dz);
                // back through W2 and tanh
                let da: Vec<f64> = (0..*hidden)
                    .map(|u| {
                        let dh: f64 = (0..*classes).map(|c| w2[c * hidden + u] * dz[c]).sum();
                        dh * (1.0 - h[u] * h[u])
                    })
                    .collect();
                outer_into(gw1, &da, x);
                gb1.copy_from_slice(&da);
            }
        }
        (fwd.loss, ParamVector::from_vec_unchecked(grad))
    }
}

struct Forward {
    loss: f64,
    logits: Option<Vec<f64>>,
    hidden: Option<Vec<f64>>,
}

/// `W x + b` for row-major `W` with `rows` rows.
fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| b[r] + w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn outer_into(out: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        for (o, &bc) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
            *o = ar * bc;
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn cross_entropy(z: &[f64], class: usize) -> f64 {
    log_sum_exp(z) - z[class]
}

fn softmax_minus_onehot(z: &[f64], class: usize) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter()
        .enumerate()
        .map(|(c, v)| (v - lse).exp() - if c == class { 1.0 } else { 0.0 })
        .collect()
}

fn argmax(z: &[f64]) -> usize {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Minimiser of `Σ_i ½(θ−a_i)ᵀD_i(θ−a_i)` for diagonal `D_i`:
/// `θ*_j = Σ_i D_ij a_ij / Σ_i D_ij`.
pub fn quadratic_minimizer(clients: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
    let (d0, _) = clients
        .first()
        .ok_or_else(|| Error::Contract("no clients".into()))?;
    let d = d0.len();
    let mut num = vec![0.0; d];
    let mut den = vec![0.0; d];
    for (curv, center) in clients {
        ensure_dim(d, curv.len())?;
        ensure_dim(d, center.len())?;
        for j in 0..d {
            num[j] += curv[j] * center[j];
            den[j] += curv[j];
        }
    }
    Ok(num.iter().zip(&den).map(|(n, m)| n / m).collect())
}
