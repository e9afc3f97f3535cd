//! Rectification, background removal, cropping and composite assembly.
//!
//! The fixed order is `rectify -> strip_background -> crop_center ->
//! assemble`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::phantom::{BScan, Segmentation, ILM, N_BOUNDARIES, N_LAYERS, OB_RPE};
use crate::store::tensor::{TensorError, TensorFile};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot crop {height}x{width} image to {out_h}x{out_w}")]
    TooSmall {
        height: usize,
        width: usize,
        out_h: usize,
        out_w: usize,
    },
    #[error("composite tensor must be 3xHxW f32, got {0:?}")]
    BadComposite(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    Composite,
    Raw3,
    Mask3,
    Contour3,
}

impl ChannelMode {
    pub const ALL: [ChannelMode; 4] = [
        ChannelMode::Composite,
        ChannelMode::Raw3,
        ChannelMode::Mask3,
        ChannelMode::Contour3,
    ];
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelMode::Composite => "composite",
            ChannelMode::Raw3 => "raw3",
            ChannelMode::Mask3 => "mask3",
            ChannelMode::Contour3 => "contour3",
        })
    }
}

impl FromStr for ChannelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "composite" => Ok(ChannelMode::Composite),
            "raw3" => Ok(ChannelMode::Raw3),
            "mask3" => Ok(ChannelMode::Mask3),
            "contour3" => Ok(ChannelMode::Contour3),
            other => Err(format!("unknown channel mode `{other}`")),
        }
    }
}

/// Per-layer enhancement gains for the mask channel: `1 + k/10`.
pub fn default_mask_gains() -> [f64; N_LAYERS] {
    std::array::from_fn(|k| 1.0 + k as f64 / 10.0)
}

/// Three-channel model input plus the contours in its coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub height: usize,
    pub width: usize,
    /// `3 * height * width`, channel-major.
    pub data: Vec<f32>,
    pub contours: Segmentation,
}

impl Composite {
    pub fn from_channels(
        channels: [Vec<f32>; 3],
        height: usize,
        width: usize,
        contours: Segmentation,
    ) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for ch in &channels {
            assert_eq!(ch.len(), height * width, "channel extents");
            data.extend_from_slice(ch);
        }
        Self {
            height,
            width,
            data,
            contours,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn to_tensor(&self) -> TensorFile {
        TensorFile::from_f32(vec![3, self.height, self.width], self.data.clone())
            .expect("consistent shape")
    }

    pub fn from_tensor(t: TensorFile, contours: Segmentation) -> Result<Self, PreprocessError> {
        let (dims, data) = t.into_f32()?;
        if dims.len() != 3 || dims[0] != 3 || dims[2] != contours.width() {
            return Err(PreprocessError::BadComposite(dims));
        }
        Ok(Self {
            height: dims[1],
            width: dims[2],
            data,
            contours,
        })
    }
}

/// Shifts each column down so OB_RPE lands on the deepest rounded OB_RPE row.
pub fn rectify(b: &BScan) -> BScan {
    let bottom: Vec<i64> = b.contours.boundary(OB_RPE).iter().map(|v| v.round() as i64).collect();
    let target = bottom.iter().copied().max().unwrap_or(0);
    let shifts: Vec<i64> = bottom.iter().map(|&r| target - r).collect();
    let (h, w) = (b.height, b.width);
    let mut pixels = vec![0u16; h * w];
    for (c, &s) in shifts.iter().enumerate() {
        let s = s as usize;
        for r in s..h {
            pixels[r * w + c] = b.pixels[(r - s) * w + c];
        }
    }
    let mut contours = b.contours.clone();
    contours.shift_columns(&shifts.iter().map(|&s| s as f64).collect::<Vec<_>>());
    BScan {
        height: h,
        width: w,
        pixels,
        contours,
    }
}

/// Zeroes pixels above ILM and below OB_RPE, per column.
pub fn strip_background(b: &BScan) -> BScan {
    let mut out = b.clone();
    for c in 0..b.width {
        let top = b.contours.at(ILM, c);
        let bottom = b.contours.at(OB_RPE, c);
        for r in 0..b.height {
            let row = r as f64;
            if row < top || row > bottom {
                out.pixels[r * b.width + c] = 0;
            }
        }
    }
    out
}

/// Centre crop; offsets are `floor((in - out) / 2)` on each axis.
pub fn crop_center(b: &BScan, out_h: usize, out_w: usize) -> Result<BScan, PreprocessError> {
    if b.height < out_h || b.width < out_w {
        return Err(PreprocessError::TooSmall {
            height: b.height,
            width: b.width,
            out_h,
            out_w,
        });
    }
    let (r0, c0) = crop_offsets(b.height, b.width, out_h, out_w);
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for r in r0..r0 + out_h {
        pixels.extend_from_slice(&b.pixels[r * b.width + c0..r * b.width + c0 + out_w]);
    }
    let mut contours = b.contours.slice_columns(c0, out_w);
    contours.shift_all(-(r0 as f64));
    Ok(BScan {
        height: out_h,
        width: out_w,
        pixels,
        contours,
    })
}

pub fn crop_offsets(h: usize, w: usize, out_h: usize, out_w: usize) -> (usize, usize) {
    ((h - out_h) / 2, (w - out_w) / 2)
}

/// Index of the layer containing `row` in column `c`, or `None` outside
/// `[ILM, OB_RPE]`. Rows on a boundary belong to the layer below it; rows
/// on OB_RPE belong to the deepest layer.
pub fn layer_at(seg: &Segmentation, row: f64, c: usize) -> Option<usize> {
    if row < seg.at(ILM, c) || row > seg.at(OB_RPE, c) {
        return None;
    }
    let k = (1..N_BOUNDARIES).take_while(|&j| seg.at(j, c) <= row).count();
    Some(k.min(N_LAYERS - 1))
}

/// Layer-masked channel before renormalisation: intensity times the gain of
/// the pixel's layer, zero outside the retina.
pub fn layer_mask_unnormalized(b: &BScan, gains: &[f64; N_LAYERS]) -> Vec<f32> {
    let mut out = vec![0f32; b.height * b.width];
    for r in 0..b.height {
        for c in 0..b.width {
            if let Some(k) = layer_at(&b.contours, r as f64, c) {
                out[r * b.width + c] = (b.get(r, c) as f64 * gains[k]) as f32;
            }
        }
    }
    out
}

/// Layer-masked channel scaled by its maximum into `[0, 1]`.
pub fn make_layer_mask(b: &BScan, gains: &[f64; N_LAYERS]) -> Vec<f32> {
    let mut out = layer_mask_unnormalized(b, gains);
    let max = out.iter().copied().fold(0f32, f32::max);
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    out
}

/// One-pixel-thick rasterisation of all boundaries at their rounded rows.
pub fn make_contour_channel(b: &BScan) -> Vec<f32> {
    let mut out = vec![0f32; b.height * b.width];
    for j in 0..N_BOUNDARIES {
        for c in 0..b.width {
            let r = b.contours.at(j, c).round();
            if r >= 0.0 && (r as usize) < b.height {
                out[r as usize * b.width + c] = 1.0;
            }
        }
    }
    out
}

/// Min-max normalised intensities; constant images map to zero.
pub fn normalized_raw(b: &BScan) -> Vec<f32> {
    let min = b.pixels.iter().copied().min().unwrap_or(0);
    let max = b.pixels.iter().copied().max().unwrap_or(0);
    if max == min {
        return vec![0.0; b.pixels.len()];
    }
    let span = (max - min) as f32;
    b.pixels.iter().map(|&v| (v - min) as f32 / span).collect()
}

pub fn assemble(b: &BScan, mode: ChannelMode, gains: &[f64; N_LAYERS]) -> Composite {
    let channels = match mode {
        ChannelMode::Composite => [normalized_raw(b), make_layer_mask(b, gains), make_contour_channel(b)],
        ChannelMode::Raw3 => {
            let raw = normalized_raw(b);
            [raw.clone(), raw.clone(), raw]
        }
        ChannelMode::Mask3 => {
            let m = make_layer_mask(b, gains);
            [m.clone(), m.clone(), m]
        }
        ChannelMode::Contour3 => {
            let m = make_contour_channel(b);
            [m.clone(), m.clone(), m]
        }
    };
    Composite::from_channels(channels, b.height, b.width, b.contours.clone())
}

/// Rectify, strip, crop to `size x size`, assemble.
pub fn preprocess(
    b: &BScan,
    size: usize,
    mode: ChannelMode,
    gains: &[f64; N_LAYERS],
) -> Result<Composite, PreprocessError> {
    let cropped = crop_center(&strip_background(&rectify(b)), size, size)?;
    Ok(assemble(&cropped, mode, gains))
}
