//! Convolutional backbone plus classification head, with reverse-mode
//! gradients.
//!
//! Backbone: `n` blocks of 3x3 stride-2 convolution + ReLU, then global
//! average pooling. Head: linear to `hidden`, layer norm, ReLU, dropout,
//! linear to 2 logits.

use super::layers::{conv_backward, conv_forward, gemm, ConvShape};
use super::ModelError;
use crate::preprocess::Composite;
use crate::store::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Channel counts, input first: `[3, 8, 16, 32, 64]` for four blocks.
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![3, 8, 16, 32, 64],
            hidden: 64,
            dropout: 0.4,
        }
    }
}

impl ModelConfig {
    pub fn n_blocks(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn features(&self) -> usize {
        *self.channels.last().expect("at least one channel entry")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![0.0; n],
        }
    }
}

/// All trainable tensors in a fixed order: `conv{i}.weight`, `conv{i}.bias`
/// for each block, then `head.fc1.weight`, `head.fc1.bias`, `head.ln.gamma`,
/// `head.ln.beta`, `head.fc2.weight`, `head.fc2.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl ParamSet {
    /// Zero-valued parameters (layer-norm scale included).
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        for i in 0..config.n_blocks() {
            let (ci, co) = (config.channels[i], config.channels[i + 1]);
            tensors.push(NamedTensor::zeros(format!("conv{i}.weight"), vec![co, ci, 3, 3]));
            tensors.push(NamedTensor::zeros(format!("conv{i}.bias"), vec![co]));
        }
        let (f, h) = (config.features(), config.hidden);
        tensors.push(NamedTensor::zeros("head.fc1.weight".into(), vec![h, f]));
        tensors.push(NamedTensor::zeros("head.fc1.bias".into(), vec![h]));
        tensors.push(NamedTensor::zeros("head.ln.gamma".into(), vec![h]));
        tensors.push(NamedTensor::zeros("head.ln.beta".into(), vec![h]));
        tensors.push(NamedTensor::zeros("head.fc2.weight".into(), vec![N_CLASSES, h]));
        tensors.push(NamedTensor::zeros("head.fc2.bias".into(), vec![N_CLASSES]));
        Self {
            config: config.clone(),
            tensors,
        }
    }

    /// Kaiming fan-in normal weights, zero biases, unit layer-norm scale.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(config);
        for t in &mut p.tensors {
            if t.name.ends_with(".weight") {
                let fan_in: usize = t.shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                t.data.iter_mut().for_each(|v| *v = std * rng.normal());
            } else if t.name == "head.ln.gamma" {
                t.data.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        p
    }

    pub fn conv_weight(&self, i: usize) -> &[f64] {
        &self.tensors[2 * i].data
    }

    pub fn conv_bias(&self, i: usize) -> &[f64] {
        &self.tensors[2 * i + 1].data
    }

    fn head(&self, j: usize) -> &[f64] {
        &self.tensors[2 * self.config.n_blocks() + j].data
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

/// Batch input in `[3, B, H, W]` layout.
#[derive(Debug, Clone)]
pub struct Batch {
    pub data: Vec<f64>,
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Batch {
    pub fn from_composites(items: &[&Composite]) -> Result<Self, ModelError> {
        let first = items.first().ok_or(ModelError::EmptyBatch)?;
        let (h, w) = (first.height, first.width);
        if items.iter().any(|c| c.height != h || c.width != w) {
            return Err(ModelError::Shape("composites in a batch differ in size".into()));
        }
        let b = items.len();
        let plane = h * w;
        let mut data = vec![0.0; 3 * b * plane];
        for (bi, c) in items.iter().enumerate() {
            for ch in 0..3 {
                let dst = &mut data[(ch * b + bi) * plane..(ch * b + bi + 1) * plane];
                for (d, s) in dst.iter_mut().zip(c.channel(ch)) {
                    *d = *s as f64;
                }
            }
        }
        Ok(Self {
            data,
            channels: 3,
            batch: b,
            height: h,
            width: w,
        })
    }

    /// Raw `[C, B, H, W]` values.
    pub fn from_raw(data: Vec<f64>, channels: usize, batch: usize, height: usize, width: usize) -> Self {
        assert_eq!(data.len(), channels * batch * height * width);
        Self {
            data,
            channels,
            batch,
            height,
            width,
        }
    }
}

struct BlockCache {
    shape: ConvShape,
    col: Vec<f64>,
    /// Post-ReLU activation, `[C_out, B, Ho, Wo]`.
    act: Vec<f64>,
}

/// Everything backward needs from a forward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    batch: usize,
    features: Vec<f64>,
    h1: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    ln_out: Vec<f64>,
    /// Dropout multipliers (0 or 1/(1-p)); all ones in evaluation mode.
    dropout_mask: Vec<f64>,
    dropped: Vec<f64>,
    pub logits: Vec<[f64; N_CLASSES]>,
}

impl ForwardCache {
    /// Final convolutional activation `[C, B, Ho, Wo]` and its spatial extents.
    pub fn final_activation(&self) -> (&[f64], usize, usize) {
        let last = self.blocks.last().expect("at least one block");
        (&last.act, last.shape.ho(), last.shape.wo())
    }
}

/// `out[b, j] = bias[j] + sum_i x[b, i] * w[j, i]`.
fn linear(x: &[f64], w: &[f64], bias: &[f64], batch: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * n_out];
    for row in out.chunks_mut(n_out) {
        row.copy_from_slice(bias);
    }
    gemm(batch, n_in, n_out, x, (n_in as isize, 1), w, (1, n_in as isize), 1.0, &mut out, (n_out as isize, 1));
    out
}

pub fn forward(
    p: &ParamSet,
    x: &Batch,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<ForwardCache, ModelError> {
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("input".into()));
    }
    let cfg = &p.config;
    if x.channels != cfg.channels[0] {
        return Err(ModelError::Shape(format!(
            "input has {} channels, model expects {}",
            x.channels, cfg.channels[0]
        )));
    }
    let b = x.batch;
    let mut blocks = Vec::with_capacity(cfg.n_blocks());
    let (mut h, mut w) = (x.height, x.width);
    let mut input: Option<Vec<f64>> = None;
    for i in 0..cfg.n_blocks() {
        let shape = ConvShape {
            c_in: cfg.channels[i],
            c_out: cfg.channels[i + 1],
            batch: b,
            h,
            w,
        };
        let src = input.as_deref().unwrap_or(&x.data);
        let (mut z, col) = conv_forward(src, p.conv_weight(i), p.conv_bias(i), &shape);
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        h = shape.ho();
        w = shape.wo();
        input = Some(z.clone());
        blocks.push(BlockCache { shape, col, act: z });
    }

    let f = cfg.features();
    let spatial = h * w;
    let act = input.expect("at least one block");
    let mut features = vec![0.0; b * f];
    for c in 0..f {
        for bi in 0..b {
            let s: f64 = act[(c * b + bi) * spatial..(c * b + bi + 1) * spatial].iter().sum();
            features[bi * f + c] = s / spatial as f64;
        }
    }

    let hd = cfg.hidden;
    let h1 = linear(&features, p.head(0), p.head(1), b, f, hd);
    let (gamma, beta) = (p.head(2), p.head(3));
    let mut xhat = vec![0.0; b * hd];
    let mut inv_std = vec![0.0; b];
    let mut ln_out = vec![0.0; b * hd];
    for bi in 0..b {
        let row = &h1[bi * hd..(bi + 1) * hd];
        let mean = row.iter().sum::<f64>() / hd as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hd as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[bi] = is;
        for j in 0..hd {
            let xh = (row[j] - mean) * is;
            xhat[bi * hd + j] = xh;
            ln_out[bi * hd + j] = (gamma[j] * xh + beta[j]).max(0.0);
        }
    }

    let keep = 1.0 - cfg.dropout;
    let dropout_mask: Vec<f64> = if train_mode && cfg.dropout > 0.0 {
        (0..b * hd)
            .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    } else {
        vec![1.0; b * hd]
    };
    let dropped: Vec<f64> = ln_out.iter().zip(&dropout_mask).map(|(a, m)| a * m).collect();
    let out = linear(&dropped, p.head(4), p.head(5), b, hd, N_CLASSES);
    let logits: Vec<[f64; N_CLASSES]> = out.chunks(N_CLASSES).map(|r| [r[0], r[1]]).collect();
    if logits.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("logits".into()));
    }
    Ok(ForwardCache {
        blocks,
        batch: b,
        features,
        h1,
        xhat,
        inv_std,
        ln_out,
        dropout_mask,
        dropped,
        logits,
    })
}

/// Gradients of `sum_b sum_k d_logits[b][k] * logits[b][k]` with respect
/// to every parameter, plus the gradient at the final convolutional
/// activation (`[C, B, Ho, Wo]`).
pub fn backward(
    p: &ParamSet,
    cache: &ForwardCache,
    d_logits: &[[f64; N_CLASSES]],
) -> (ParamSet, Vec<f64>) {
    let cfg = &p.config;
    let b = cache.batch;
    let (f, hd) = (cfg.features(), cfg.hidden);
    let nb = cfg.n_blocks();
    let mut g = ParamSet::zeros(cfg);
    let dl: Vec<f64> = d_logits.iter().flatten().copied().collect();

    // fc2
    {
        let (dw, db) = linear_backward_params(&dl, &cache.dropped, b, hd, N_CLASSES);
        g.tensors[2 * nb + 4].data = dw;
        g.tensors[2 * nb + 5].data = db;
    }
    let mut d_dropped = vec![0.0; b * hd];
    gemm(b, N_CLASSES, hd, &dl, (N_CLASSES as isize, 1), p.head(4), (hd as isize, 1), 0.0, &mut d_dropped, (hd as isize, 1));

    // dropout, relu, layer norm
    let (gamma, beta) = (p.head(2), p.head(3));
    let mut dgamma = vec![0.0; hd];
    let mut dbeta = vec![0.0; hd];
    let mut dh1 = vec![0.0; b * hd];
    for bi in 0..b {
        let mut dxhat = vec![0.0; hd];
        for j in 0..hd {
            let idx = bi * hd + j;
            let pre = gamma[j] * cache.xhat[idx] + beta[j];
            let dy = if pre > 0.0 {
                d_dropped[idx] * cache.dropout_mask[idx]
            } else {
                0.0
            };
            dgamma[j] += dy * cache.xhat[idx];
            dbeta[j] += dy;
            dxhat[j] = dy * gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / hd as f64;
        let mean_dx = dxhat
            .iter()
            .zip(&cache.xhat[bi * hd..(bi + 1) * hd])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / hd as f64;
        for j in 0..hd {
            let xh = cache.xhat[bi * hd + j];
            dh1[bi * hd + j] = cache.inv_std[bi] * (dxhat[j] - mean_d - xh * mean_dx);
        }
    }
    g.tensors[2 * nb + 2].data = dgamma;
    g.tensors[2 * nb + 3].data = dbeta;
    let _ = &cache.h1;
    let _ = &cache.ln_out;

    // fc1
    {
        let (dw, db) = linear_backward_params(&dh1, &cache.features, b, f, hd);
        g.tensors[2 * nb].data = dw;
        g.tensors[2 * nb + 1].data = db;
    }
    let mut dfeat = vec![0.0; b * f];
    gemm(b, hd, f, &dh1, (hd as isize, 1), p.head(0), (f as isize, 1), 0.0, &mut dfeat, (f as isize, 1));

    // global average pool
    let last = cache.blocks.last().expect("at least one block");
    let spatial = last.shape.ho() * last.shape.wo();
    let mut d_act = vec![0.0; f * b * spatial];
    for c in 0..f {
        for bi in 0..b {
            let v = dfeat[bi * f + c] / spatial as f64;
            d_act[(c * b + bi) * spatial..(c * b + bi + 1) * spatial]
                .iter_mut()
                .for_each(|d| *d = v);
        }
    }
    let d_final = d_act.clone();

    // conv blocks
    let mut d = d_act;
    for i in (0..nb).rev() {
        let blk = &cache.blocks[i];
        for (dv, a) in d.iter_mut().zip(&blk.act) {
            if *a <= 0.0 {
                *dv = 0.0;
            }
        }
        let (dw, db, dx) = conv_backward(&d, &blk.col, p.conv_weight(i), &blk.shape, i > 0);
        g.tensors[2 * i].data = dw;
        g.tensors[2 * i + 1].data = db;
        if let Some(dx) = dx {
            d = dx;
        }
    }
    (g, d_final)
}

/// `dW[j, i] = sum_b dy[b, j] x[b, i]`, `db[j] = sum_b dy[b, j]`.
fn linear_backward_params(dy: &[f64], x: &[f64], b: usize, n_in: usize, n_out: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; n_out * n_in];
    gemm(n_out, b, n_in, dy, (1, n_out as isize), x, (n_in as isize, 1), 0.0, &mut dw, (n_in as isize, 1));
    let mut db = vec![0.0; n_out];
    for row in dy.chunks(n_out) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (dw, db)
}

/// Logits from a final activation map, in evaluation mode. Used to probe
/// the head independently of the backbone.
pub fn logits_from_activation(p: &ParamSet, act: &[f64], batch: usize, spatial: usize) -> Vec<[f64; N_CLASSES]> {
    let cfg = &p.config;
    let (f, hd) = (cfg.features(), cfg.hidden);
    let mut features = vec![0.0; batch * f];
    for c in 0..f {
        for bi in 0..batch {
            let s: f64 = act[(c * batch + bi) * spatial..(c * batch + bi + 1) * spatial].iter().sum();
            features[bi * f + c] = s / spatial as f64;
        }
    }
    let h1 = linear(&features, p.head(0), p.head(1), batch, f, hd);
    let (gamma, beta) = (p.head(2), p.head(3));
    let mut z = vec![0.0; batch * hd];
    for bi in 0..batch {
        let row = &h1[bi * hd..(bi + 1) * hd];
        let mean = row.iter().sum::<f64>() / hd as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hd as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..hd {
            z[bi * hd + j] = (gamma[j] * (row[j] - mean) * is + beta[j]).max(0.0);
        }
    }
    linear(&z, p.head(4), p.head(5), batch, hd, N_CLASSES)
        .chunks(N_CLASSES)
        .map(|r| [r[0], r[1]])
        .collect()
}

pub fn softmax(logits: &[f64; N_CLASSES]) -> [f64; N_CLASSES] {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// Probability of AD for each composite, evaluation mode.
pub fn predict_proba(p: &ParamSet, items: &[&Composite]) -> Result<Vec<f64>, ModelError> {
    let batch = Batch::from_composites(items)?;
    let cache = forward(p, &batch, false, &mut Rng::new(0))?;
    Ok(cache.logits.iter().map(|l| softmax(l)[1]).collect())
}
