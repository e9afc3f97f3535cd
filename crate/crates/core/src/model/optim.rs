//! Loss, optimizer and weight averaging.

use super::network::{softmax, ParamSet, N_CLASSES};
use super::ModelError;

/// `1 + (cap - min(y, cap)) / cap` for AD, 1 for controls (`None`).
pub fn year_weight(years: Option<f64>, year_cap: f64) -> Result<f64, ModelError> {
    match years {
        None => Ok(1.0),
        Some(y) if y < 0.0 || y.is_nan() => Err(ModelError::NegativeYears(y)),
        Some(y) => Ok(1.0 + (year_cap - y.min(year_cap)) / year_cap),
    }
}

/// Weighted cross-entropy normalized by the weight sum, and its gradient
/// with respect to the logits.
pub fn weighted_ce_loss(
    logits: &[[f64; N_CLASSES]],
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Vec<[f64; N_CLASSES]>), ModelError> {
    if logits.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if labels.len() != logits.len() || weights.len() != logits.len() {
        return Err(ModelError::Shape("logits, labels and weights differ in length".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((l, &y), &w) in logits.iter().zip(labels).zip(weights) {
        // log-sum-exp form keeps large margins finite
        let m = l[0].max(l[1]);
        let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
        loss += w * (lse - l[y]);
        let p = softmax(l);
        let mut g = [0.0; N_CLASSES];
        for k in 0..N_CLASSES {
            let target = if k == y { 1.0 } else { 0.0 };
            g[k] = w * (p[k] - target) / total;
        }
        grad.push(g);
    }
    Ok((loss / total, grad))
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Decoupled decay first, then the bias-corrected Adam update.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), ModelError> {
        if !params.same_shape(grads) || params.tensors.len() != self.m.len() {
            return Err(ModelError::Shape("gradient does not match parameters".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (ti, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * self.weight_decay * p.data[i];
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Running arithmetic mean of parameter snapshots.
#[derive(Debug, Clone, Default)]
pub struct SwaAccumulator {
    mean: Option<ParamSet>,
    pub count: usize,
}

impl SwaAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, p: &ParamSet) -> Result<(), ModelError> {
        match &mut self.mean {
            None => self.mean = Some(p.clone()),
            Some(mean) => {
                if !mean.same_shape(p) {
                    return Err(ModelError::Shape("SWA snapshot shape changed".into()));
                }
                let n = (self.count + 1) as f64;
                for (mt, pt) in mean.tensors.iter_mut().zip(&p.tensors) {
                    for (a, b) in mt.data.iter_mut().zip(&pt.data) {
                        *a += (b - *a) / n;
                    }
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn finalize(&self) -> Result<ParamSet, ModelError> {
        self.mean.clone().ok_or(ModelError::SwaEmpty)
    }
}
