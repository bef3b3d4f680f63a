use serde::{Deserialize, Serialize};

use super::tensor::{softmax, Tensor};
use crate::error::{Error, Result};

/// Floor applied inside `ln` so a saturated softmax gives a finite loss.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal { gamma: f64 },
}

impl LossKind {
    pub fn gamma(&self) -> f64 {
        match *self {
            LossKind::CrossEntropy => 0.0,
            LossKind::Focal { gamma } => gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    #[serde(flatten)]
    pub kind: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            class_weights: None,
        }
    }

    pub fn focal(gamma: f64) -> Self {
        Self {
            kind: LossKind::Focal { gamma },
            class_weights: None,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let LossKind::Focal { gamma } = self.kind {
            if !(gamma >= 0.0 && gamma.is_finite()) {
                return Err(Error::InvalidConfig(format!("focal gamma must be >= 0, got {gamma}")));
            }
        }
        if let Some(w) = &self.class_weights {
            if w.len() != num_classes || w.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                return Err(Error::ClassWeights(format!(
                    "need {num_classes} positive weights, got {w:?}"
                )));
            }
        }
        Ok(())
    }

    /// Mean weighted loss over a `[n, k]` batch of logits and the gradient
    /// with respect to those logits.
    pub fn loss_and_grad(&self, logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let (n, k) = match *logits.shape() {
            [n, k] if n == labels.len() => (n, k),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![labels.len(), logits.item_len()],
                    actual: logits.shape().to_vec(),
                })
            }
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::ShapeMismatch {
                expected: vec![k],
                actual: vec![bad + 1],
            });
        }
        let probs = softmax(logits);
        let gamma = self.kind.gamma();
        let mut grad = Tensor::zeros(&[n, k]);
        let mut total = 0.0;
        for (i, &t) in labels.iter().enumerate() {
            let alpha = self.class_weights.as_ref().map_or(1.0, |w| w[t]);
            let p = probs.row(i);
            let pt = p[t];
            total += alpha * focal_term(pt, gamma);
            // d/dz_j of -alpha (1-p_t)^g ln p_t equals dL/dp_t * p_t (delta_tj - p_j).
            let dl_dpt_pt = alpha * focal_slope_times_p(pt, gamma);
            for j in 0..k {
                let delta = if j == t { 1.0 } else { 0.0 };
                grad.data_mut()[i * k + j] = dl_dpt_pt * (delta - p[j]) / n as f64;
            }
        }
        Ok((total / n as f64, grad))
    }
}

/// `-(1 - p)^gamma ln p` with the log floor.
fn focal_term(p: f64, gamma: f64) -> f64 {
    let m = (1.0 - p).max(0.0);
    -m.powf(gamma) * p.max(LOG_EPS).ln()
}

/// `p * dL/dp` for `L = -(1 - p)^gamma ln p`, which is
/// `gamma (1-p)^(gamma-1) p ln p - (1-p)^gamma`.
fn focal_slope_times_p(p: f64, gamma: f64) -> f64 {
    let m = (1.0 - p).max(0.0);
    let lnp = p.max(LOG_EPS).ln();
    let hard = if gamma == 0.0 || m == 0.0 {
        0.0
    } else {
        gamma * m.powf(gamma - 1.0) * p * lnp
    };
    hard - m.powf(gamma)
}

/// Focal loss of one probability vector against a one-hot target:
/// `-Σ α_l t_l (1 - y_l)^γ ln y_l`. A zero probability at the true class
/// is floored at [`LOG_EPS`] inside the log.
pub fn focal_loss(y: &[f64], t: &[f64], gamma: f64, alpha: &[f64]) -> f64 {
    y.iter()
        .zip(t)
        .zip(alpha)
        .filter(|((_, &tl), _)| tl != 0.0)
        .map(|((&yl, &tl), &al)| al * tl * focal_term(yl, gamma))
        .sum()
}

/// `-Σ α_l t_l ln y_l`.
pub fn cross_entropy(y: &[f64], t: &[f64], alpha: &[f64]) -> f64 {
    y.iter()
        .zip(t)
        .zip(alpha)
        .filter(|((_, &tl), _)| tl != 0.0)
        .map(|((&yl, &tl), &al)| -al * tl * yl.max(LOG_EPS).ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub alpha: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

/// `α_l = ln N_l / ln N`. A class with a single sample would get weight 0
/// and an empty class a negative infinite one; both are rejected.
pub fn class_weights(counts: &[u64]) -> Result<ClassWeights> {
    let total: u64 = counts.iter().sum();
    if total < 2 {
        return Err(Error::ClassWeights(format!("need at least 2 samples, got {total}")));
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    if let Some(l) = counts.iter().position(|&c| c == 1) {
        return Err(Error::ClassWeights(format!(
            "class {l} has a single sample, so its weight ln 1 / ln N would be 0"
        )));
    }
    let ln_n = (total as f64).ln();
    Ok(ClassWeights {
        alpha: counts.iter().map(|&c| (c as f64).ln() / ln_n).collect(),
        counts: counts.to_vec(),
        total,
    })
}
