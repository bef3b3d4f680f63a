//! Central-difference gradient checks.

use super::layers::Layer;
use super::loss::LossSpec;
use super::tensor::Tensor;
use crate::error::Result;

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-300 {
        0.0
    } else {
        diff / norm
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub input: f64,
    pub params: Vec<(String, f64)>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.1).fold(self.input, f64::max)
    }
}

fn objective(layer: &mut dyn Layer, x: &Tensor, r: &[f64]) -> Result<f64> {
    Ok(layer.forward(x)?.data().iter().zip(r).map(|(a, b)| a * b).sum())
}

fn nudge(layer: &mut dyn Layer, index: usize, j: usize, delta: f64) {
    let mut k = 0;
    layer.visit_params("", &mut |_, p| {
        if k == index {
            p.value.data_mut()[j] += delta;
        }
        k += 1;
    });
}

/// Checks `layer` on input `x` against the scalar `Σ r ⊙ layer(x)` with
/// step `h`, where `r` is a fixed pseudo-random weighting.
pub fn check_layer(layer: &mut dyn Layer, x: &Tensor, h: f64) -> Result<GradReport> {
    let y = layer.forward(x)?;
    let r: Vec<f64> = (0..y.len()).map(|i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.5).collect();
    let mut grads = Vec::new();
    layer.visit_params("", &mut |name, p| {
        p.zero_grad();
        grads.push((name.to_string(), p.value.len()));
    });
    let dx = layer.backward(&Tensor::from_vec(y.shape(), r.clone())?);
    let mut analytic = Vec::new();
    layer.visit_params("", &mut |_, p| analytic.push(p.grad.data().to_vec()));

    let mut numeric = vec![0.0; x.len()];
    let mut xp = x.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let v = xp.data()[i];
        xp.data_mut()[i] = v + h;
        let up = objective(layer, &xp, &r)?;
        xp.data_mut()[i] = v - h;
        let down = objective(layer, &xp, &r)?;
        xp.data_mut()[i] = v;
        *slot = (up - down) / (2.0 * h);
    }
    let input = relative_error(dx.data(), &numeric);

    let mut params = Vec::new();
    for (k, (name, len)) in grads.iter().enumerate() {
        let mut num = vec![0.0; *len];
        for (j, slot) in num.iter_mut().enumerate() {
            nudge(layer, k, j, h);
            let up = objective(layer, x, &r)?;
            nudge(layer, k, j, -2.0 * h);
            let down = objective(layer, x, &r)?;
            nudge(layer, k, j, h);
            *slot = (up - down) / (2.0 * h);
        }
        params.push((name.clone(), relative_error(&analytic[k], &num)));
    }
    Ok(GradReport { input, params })
}

/// Checks the logit gradient of `spec` at `logits` with step `h`.
pub fn check_loss(spec: &LossSpec, logits: &Tensor, labels: &[usize], h: f64) -> Result<f64> {
    let (_, analytic) = spec.loss_and_grad(logits, labels)?;
    let mut z = logits.clone();
    let mut numeric = vec![0.0; z.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let v = z.data()[i];
        z.data_mut()[i] = v + h;
        let up = spec.loss_and_grad(&z, labels)?.0;
        z.data_mut()[i] = v - h;
        let down = spec.loss_and_grad(&z, labels)?.0;
        z.data_mut()[i] = v;
        *slot = (up - down) / (2.0 * h);
    }
    Ok(relative_error(analytic.data(), &numeric))
}
