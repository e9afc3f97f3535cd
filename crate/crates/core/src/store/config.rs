//! Run configuration as flat `key=value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the
//! field names of [`RunConfig`]; phantom and augmentation knobs use the
//! `phantom.` and `augment.` prefixes. Unknown keys are rejected.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::augment::AugmentRanges;
use crate::phantom::{Region, SignalMode, DEFAULT_TARGET_LAYER, N_LAYERS};
use crate::preprocess::{default_mask_gains, ChannelMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub thinning_fraction: f64,
    pub target_layer: usize,
    pub region: Region,
    pub signal_mode: SignalMode,
    pub speckle_sigma: f64,
    /// Equalizes target and neighbour layer intensities and uses
    /// compensated thinning, so the class signal lives only in contours.
    pub geometry_only: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            thinning_fraction: 0.4,
            target_layer: DEFAULT_TARGET_LAYER,
            region: Region::CentralSubfield,
            signal_mode: SignalMode::ShiftBelow,
            speckle_sigma: 0.25,
            geometry_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Used when `lr_grid` has a single entry or by `train` directly.
    pub learning_rate: f64,
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub swa_start_epoch: usize,
    pub year_cap: f64,
    pub channel_mode: ChannelMode,
    pub augmentation_enabled: bool,
    pub threshold_saliency: f64,
    /// Composite side length; phantoms are generated at
    /// `round(image_size * 650 / 512) x image_size`.
    pub image_size: usize,
    pub n_ad: usize,
    pub n_cn: usize,
    pub n_runs: usize,
    pub n_outer: usize,
    pub n_inner: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub top_percent: f64,
    /// Central subfield half-width in composite pixels.
    pub subfield_halfwidth: f64,
    pub overlap_pooled: bool,
    pub ttest_rho: f64,
    /// `None` means `n_runs - 1`.
    pub ttest_df: Option<f64>,
    pub mask_gains: [f64; N_LAYERS],
    pub phantom: PhantomConfig,
    pub augment: AugmentRanges,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            learning_rate: 1e-3,
            lr_grid: vec![1e-3, 1e-4, 2.7e-5],
            batch_size: 4,
            epochs: 100,
            swa_start_epoch: 80,
            year_cap: 4.0,
            channel_mode: ChannelMode::Composite,
            augmentation_enabled: true,
            threshold_saliency: 0.8,
            image_size: 512,
            n_ad: 28,
            n_cn: 30,
            n_runs: 5,
            n_outer: 5,
            n_inner: 3,
            weight_decay: 0.01,
            dropout: 0.4,
            top_percent: 5.0,
            subfield_halfwidth: 42.0,
            overlap_pooled: false,
            ttest_rho: 0.25,
            ttest_df: None,
            mask_gains: default_mask_gains(),
            phantom: PhantomConfig::default(),
            augment: AugmentRanges::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    v.trim().parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        msg: e.to_string(),
    })
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value::<f64>(key, s))
        .collect()
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn region_name(r: Region) -> &'static str {
    match r {
        Region::Global => "global",
        Region::CentralSubfield => "central",
    }
}

fn mode_name(m: SignalMode) -> &'static str {
    match m {
        SignalMode::ShiftBelow => "shift_below",
        SignalMode::Compensated => "compensated",
    }
}

impl RunConfig {
    /// Desk-scale profile: 64x64 inputs, 30 epochs, averaging from epoch 24.
    pub fn fast() -> Self {
        let size = 64;
        Self {
            epochs: 30,
            swa_start_epoch: 24,
            image_size: size,
            subfield_halfwidth: (42.0 * size as f64 / 512.0_f64).round(),
            augment: AugmentRanges::for_size(size),
            ..Self::default()
        }
    }

    /// Phantom slice height matching `image_size`.
    pub fn phantom_height(&self) -> usize {
        (self.image_size as f64 * 650.0 / 512.0).round() as usize
    }

    pub fn effective_df(&self) -> f64 {
        self.ttest_df.unwrap_or(self.n_runs.saturating_sub(1) as f64)
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "seed" => self.seed = parse_value(k, v)?,
            "learning_rate" => self.learning_rate = parse_value(k, v)?,
            "lr_grid" => self.lr_grid = parse_list(k, v)?,
            "batch_size" => self.batch_size = parse_value(k, v)?,
            "epochs" => self.epochs = parse_value(k, v)?,
            "swa_start_epoch" => self.swa_start_epoch = parse_value(k, v)?,
            "year_cap" => self.year_cap = parse_value(k, v)?,
            "channel_mode" => self.channel_mode = parse_value(k, v)?,
            "augmentation_enabled" => self.augmentation_enabled = parse_value(k, v)?,
            "threshold_saliency" => self.threshold_saliency = parse_value(k, v)?,
            "image_size" => self.image_size = parse_value(k, v)?,
            "n_ad" => self.n_ad = parse_value(k, v)?,
            "n_cn" => self.n_cn = parse_value(k, v)?,
            "n_runs" => self.n_runs = parse_value(k, v)?,
            "n_outer" => self.n_outer = parse_value(k, v)?,
            "n_inner" => self.n_inner = parse_value(k, v)?,
            "weight_decay" => self.weight_decay = parse_value(k, v)?,
            "dropout" => self.dropout = parse_value(k, v)?,
            "top_percent" => self.top_percent = parse_value(k, v)?,
            "subfield_halfwidth" => self.subfield_halfwidth = parse_value(k, v)?,
            "overlap_pooled" => self.overlap_pooled = parse_value(k, v)?,
            "ttest_rho" => self.ttest_rho = parse_value(k, v)?,
            "ttest_df" => {
                self.ttest_df = if v == "auto" { None } else { Some(parse_value(k, v)?) }
            }
            "mask_gains" => {
                let g = parse_list(k, v)?;
                self.mask_gains = g.try_into().map_err(|g: Vec<f64>| ConfigError::BadValue {
                    key: k.into(),
                    msg: format!("expected {N_LAYERS} gains, got {}", g.len()),
                })?;
            }
            "phantom.thinning_fraction" => self.phantom.thinning_fraction = parse_value(k, v)?,
            "phantom.target_layer" => self.phantom.target_layer = parse_value(k, v)?,
            "phantom.region" => {
                self.phantom.region = match v {
                    "global" => Region::Global,
                    "central" => Region::CentralSubfield,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: k.into(),
                            msg: format!("`{v}` is not global or central"),
                        })
                    }
                }
            }
            "phantom.signal_mode" => {
                self.phantom.signal_mode = match v {
                    "shift_below" => SignalMode::ShiftBelow,
                    "compensated" => SignalMode::Compensated,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: k.into(),
                            msg: format!("`{v}` is not shift_below or compensated"),
                        })
                    }
                }
            }
            "phantom.speckle_sigma" => self.phantom.speckle_sigma = parse_value(k, v)?,
            "phantom.geometry_only" => self.phantom.geometry_only = parse_value(k, v)?,
            "augment.identity_weight" => self.augment.identity_weight = parse_value(k, v)?,
            "augment.max_translate" => self.augment.max_translate = parse_value(k, v)?,
            "augment.scale_min" => self.augment.scale_min = parse_value(k, v)?,
            "augment.scale_max" => self.augment.scale_max = parse_value(k, v)?,
            "augment.max_occlusion_area" => self.augment.max_occlusion_area = parse_value(k, v)?,
            "augment.gamma_min" => self.augment.gamma_min = parse_value(k, v)?,
            "augment.gamma_max" => self.augment.gamma_max = parse_value(k, v)?,
            "augment.vessel_count_max" => self.augment.vessel_count_max = parse_value(k, v)?,
            "augment.vessel_width_min" => self.augment.vessel_width_min = parse_value(k, v)?,
            "augment.vessel_width_max" => self.augment.vessel_width_max = parse_value(k, v)?,
            "augment.vessel_factor_min" => self.augment.vessel_factor_min = parse_value(k, v)?,
            "augment.vessel_factor_max" => self.augment.vessel_factor_max = parse_value(k, v)?,
            "augment.noise_sigma_max" => self.augment.noise_sigma_max = parse_value(k, v)?,
            _ => return Err(ConfigError::UnknownKey(k.to_string())),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.phantom;
        let a = &self.augment;
        vec![
            ("seed", self.seed.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("lr_grid", join(&self.lr_grid)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("swa_start_epoch", self.swa_start_epoch.to_string()),
            ("year_cap", self.year_cap.to_string()),
            ("channel_mode", self.channel_mode.to_string()),
            ("augmentation_enabled", self.augmentation_enabled.to_string()),
            ("threshold_saliency", self.threshold_saliency.to_string()),
            ("image_size", self.image_size.to_string()),
            ("n_ad", self.n_ad.to_string()),
            ("n_cn", self.n_cn.to_string()),
            ("n_runs", self.n_runs.to_string()),
            ("n_outer", self.n_outer.to_string()),
            ("n_inner", self.n_inner.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("dropout", self.dropout.to_string()),
            ("top_percent", self.top_percent.to_string()),
            ("subfield_halfwidth", self.subfield_halfwidth.to_string()),
            ("overlap_pooled", self.overlap_pooled.to_string()),
            ("ttest_rho", self.ttest_rho.to_string()),
            (
                "ttest_df",
                self.ttest_df.map_or_else(|| "auto".to_string(), |d| d.to_string()),
            ),
            ("mask_gains", join(&self.mask_gains)),
            ("phantom.thinning_fraction", p.thinning_fraction.to_string()),
            ("phantom.target_layer", p.target_layer.to_string()),
            ("phantom.region", region_name(p.region).to_string()),
            ("phantom.signal_mode", mode_name(p.signal_mode).to_string()),
            ("phantom.speckle_sigma", p.speckle_sigma.to_string()),
            ("phantom.geometry_only", p.geometry_only.to_string()),
            ("augment.identity_weight", a.identity_weight.to_string()),
            ("augment.max_translate", a.max_translate.to_string()),
            ("augment.scale_min", a.scale_min.to_string()),
            ("augment.scale_max", a.scale_max.to_string()),
            ("augment.max_occlusion_area", a.max_occlusion_area.to_string()),
            ("augment.gamma_min", a.gamma_min.to_string()),
            ("augment.gamma_max", a.gamma_max.to_string()),
            ("augment.vessel_count_max", a.vessel_count_max.to_string()),
            ("augment.vessel_width_min", a.vessel_width_min.to_string()),
            ("augment.vessel_width_max", a.vessel_width_max.to_string()),
            ("augment.vessel_factor_min", a.vessel_factor_min.to_string()),
            ("augment.vessel_factor_max", a.vessel_factor_max.to_string()),
            ("augment.noise_sigma_max", a.noise_sigma_max.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Applies `text` on top of `self`, then validates.
    pub fn merge_text(mut self, text: &str) -> Result<Self, ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::default().merge_text(text)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.swa_start_epoch >= self.epochs {
            return bad(format!(
                "swa_start_epoch {} must be below epochs {}",
                self.swa_start_epoch, self.epochs
            ));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold_saliency) {
            return bad(format!("threshold_saliency {} outside [0, 1]", self.threshold_saliency));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return bad("lr_grid must hold finite non-negative rates".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative".into());
        }
        if !(self.year_cap > 0.0) {
            return bad("year_cap must be positive".into());
        }
        if self.image_size < 32 {
            return bad(format!("image_size {} below 32", self.image_size));
        }
        if self.n_runs < 1 || self.n_outer < 2 || self.n_inner < 2 {
            return bad("need n_runs >= 1, n_outer >= 2, n_inner >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.top_percent > 0.0 && self.top_percent <= 100.0) {
            return bad(format!("top_percent {} outside (0, 100]", self.top_percent));
        }
        if self.ttest_rho < 0.0 {
            return bad("ttest_rho must be non-negative".into());
        }
        if matches!(self.ttest_df, Some(d) if !(d > 0.0)) {
            return bad("ttest_df must be positive".into());
        }
        if !(0.0..1.0).contains(&self.phantom.thinning_fraction) {
            return bad("phantom.thinning_fraction must be in [0, 1)".into());
        }
        if self.phantom.target_layer >= N_LAYERS {
            return bad("phantom.target_layer out of range".into());
        }
        Ok(())
    }
}
