//! Small convolutional classifier with a year-weighted loss, AdamW and
//! stochastic weight averaging.

pub mod layers;
pub mod network;
pub mod optim;
pub mod train;

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::store::tensor::{read_tensor, write_tensor, TensorError, TensorFile};

pub use network::{
    backward, forward, logits_from_activation, predict_proba, softmax, Batch, ForwardCache,
    ModelConfig, NamedTensor, ParamSet, N_CLASSES,
};
pub use optim::{weighted_ce_loss, year_weight, AdamW, SwaAccumulator};
pub use train::{train, Sample, TrainConfig, TrainState};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("negative years to diagnosis: {0}")]
    NegativeYears(f64),
    #[error("SWA finalized before any update")]
    SwaEmpty,
    #[error("training needs at least one sample of each class")]
    MissingClass,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("bad parameter bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

const INDEX_FILE: &str = "index.txt";

/// Writes one f32 tensor file per parameter plus `index.txt`.
///
/// The index starts with the architecture line
/// `# channels=3,8,16,32,64 hidden=64 dropout=0.4`, then one
/// `name<TAB>file<TAB>d0xd1x..` line per tensor.
pub fn save_params(p: &ParamSet, dir: impl AsRef<Path>) -> Result<(), ModelError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let c = &p.config;
    let channels: Vec<String> = c.channels.iter().map(|v| v.to_string()).collect();
    let mut index = format!(
        "# channels={} hidden={} dropout={}\n",
        channels.join(","),
        c.hidden,
        c.dropout
    );
    for t in &p.tensors {
        let file = format!("{}.oct", t.name);
        let values: Vec<f32> = t.data.iter().map(|&v| v as f32).collect();
        write_tensor(dir.join(&file), &TensorFile::from_f32(t.shape.clone(), values)?)?;
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        index.push_str(&format!("{}\t{}\t{}\n", t.name, file, dims.join("x")));
    }
    fs::write(dir.join(INDEX_FILE), index)?;
    Ok(())
}

pub fn load_params(dir: impl AsRef<Path>) -> Result<ParamSet, ModelError> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| ModelError::Bundle("missing architecture line".into()))?;
    let mut config = ModelConfig::default();
    for field in header.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| ModelError::Bundle(format!("bad header field {field}")))?;
        let bad = |_| ModelError::Bundle(format!("bad value for {k}: {v}"));
        match k {
            "channels" => {
                config.channels = v
                    .split(',')
                    .map(|s| s.parse::<usize>().map_err(|e| bad(e.to_string())))
                    .collect::<Result<_, _>>()?
            }
            "hidden" => config.hidden = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "dropout" => config.dropout = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            _ => return Err(ModelError::Bundle(format!("unknown header field {k}"))),
        }
    }
    if config.channels.len() < 2 {
        return Err(ModelError::Bundle("need at least one conv block".into()));
    }
    let mut p = ParamSet::zeros(&config);
    let mut seen = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(ModelError::Bundle(format!("bad index line: {line}")));
        }
        let (dims, values) = read_tensor(dir.join(parts[1]))?.into_f32()?;
        let slot = p
            .get_mut(parts[0])
            .ok_or_else(|| ModelError::Bundle(format!("unexpected tensor {}", parts[0])))?;
        if dims != slot.shape {
            return Err(ModelError::Shape(format!(
                "{}: expected {:?}, file has {:?}",
                parts[0], slot.shape, dims
            )));
        }
        slot.data = values.into_iter().map(f64::from).collect();
        seen += 1;
    }
    if seen != p.tensors.len() {
        return Err(ModelError::Bundle(format!(
            "index lists {seen} tensors, architecture has {}",
            p.tensors.len()
        )));
    }
    if !p.is_finite() {
        return Err(ModelError::NonFinite("loaded parameters".into()));
    }
    Ok(p)
}
