//! Training-time augmentation: one randomly chosen transform per sample.
//!
//! Geometric transforms (flip, translate, scale) move all three channels
//! through the same pixel mapping. OCT-specific transforms (occlusion,
//! contrast, vessel shadows, noise) touch the raw channel only. There are
//! no rotation or shear kinds.

use crate::preprocess::Composite;
use crate::store::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    Identity,
    HFlip,
    Translate,
    Scale,
    Occlude,
    Contrast,
    VesselShadow,
    Noise,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 8] = [
        AugmentKind::Identity,
        AugmentKind::HFlip,
        AugmentKind::Translate,
        AugmentKind::Scale,
        AugmentKind::Occlude,
        AugmentKind::Contrast,
        AugmentKind::VesselShadow,
        AugmentKind::Noise,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelScope {
    All,
    RawOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VesselBand {
    pub start: usize,
    pub width: usize,
    pub factor: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AugmentOp {
    Identity,
    HFlip,
    /// Positive `dy` moves content down, positive `dx` moves it right.
    Translate { dx: i32, dy: i32 },
    /// Zoom about the image centre, nearest-neighbour sampling.
    Scale { factor: f64 },
    /// Rectangle zeroed in the raw channel, given as fractions of the extents.
    Occlude { top: f64, left: f64, height: f64, width: f64 },
    /// Gamma curve on the raw channel.
    Contrast { gamma: f64 },
    VesselShadow { bands: Vec<VesselBand> },
    /// Additive Gaussian noise; sigma in units of the [0, 1] dynamic range.
    Noise { sigma: f64 },
}

impl AugmentOp {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentOp::Identity => AugmentKind::Identity,
            AugmentOp::HFlip => AugmentKind::HFlip,
            AugmentOp::Translate { .. } => AugmentKind::Translate,
            AugmentOp::Scale { .. } => AugmentKind::Scale,
            AugmentOp::Occlude { .. } => AugmentKind::Occlude,
            AugmentOp::Contrast { .. } => AugmentKind::Contrast,
            AugmentOp::VesselShadow { .. } => AugmentKind::VesselShadow,
            AugmentOp::Noise { .. } => AugmentKind::Noise,
        }
    }

    pub fn scope(&self) -> ChannelScope {
        match self.kind() {
            AugmentKind::Identity
            | AugmentKind::HFlip
            | AugmentKind::Translate
            | AugmentKind::Scale => ChannelScope::All,
            _ => ChannelScope::RawOnly,
        }
    }
}

/// Parameter ranges for [`sample_op`]. Pixel quantities are absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRanges {
    /// Relative weight of the identity draw; every other kind has weight 1.
    pub identity_weight: f64,
    pub max_translate: i32,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_occlusion_area: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub vessel_count_max: usize,
    pub vessel_width_min: usize,
    pub vessel_width_max: usize,
    pub vessel_factor_min: f64,
    pub vessel_factor_max: f64,
    pub noise_sigma_max: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            identity_weight: 1.0,
            max_translate: 16,
            scale_min: 0.9,
            scale_max: 1.1,
            max_occlusion_area: 0.15,
            gamma_min: 0.7,
            gamma_max: 1.4,
            vessel_count_max: 4,
            vessel_width_min: 4,
            vessel_width_max: 12,
            vessel_factor_min: 0.3,
            vessel_factor_max: 0.7,
            noise_sigma_max: 0.05,
        }
    }
}

impl AugmentRanges {
    /// Pixel ranges scaled from the 512-wide defaults to `size`.
    pub fn for_size(size: usize) -> Self {
        let s = size as f64 / 512.0;
        let px = |v: f64| (v * s).round().max(1.0);
        Self {
            max_translate: px(16.0) as i32,
            vessel_width_min: px(4.0) as usize,
            vessel_width_max: px(12.0) as usize,
            ..Self::default()
        }
    }
}

/// Draws one op; `width` bounds vessel band positions.
pub fn sample_op(rng: &mut Rng, ranges: &AugmentRanges, width: usize) -> AugmentOp {
    let weights: Vec<f64> = AugmentKind::ALL
        .iter()
        .map(|k| if *k == AugmentKind::Identity { ranges.identity_weight.max(0.0) } else { 1.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.next_f64() * total;
    let mut kind = AugmentKind::Noise;
    for (k, w) in AugmentKind::ALL.iter().zip(&weights) {
        if u < *w {
            kind = *k;
            break;
        }
        u -= w;
    }
    match kind {
        AugmentKind::Identity => AugmentOp::Identity,
        AugmentKind::HFlip => AugmentOp::HFlip,
        AugmentKind::Translate => AugmentOp::Translate {
            dx: rng.int_inclusive(-ranges.max_translate as i64, ranges.max_translate as i64) as i32,
            dy: rng.int_inclusive(-ranges.max_translate as i64, ranges.max_translate as i64) as i32,
        },
        AugmentKind::Scale => AugmentOp::Scale {
            factor: rng.uniform(ranges.scale_min, ranges.scale_max),
        },
        AugmentKind::Occlude => {
            let area = rng.uniform(0.01, ranges.max_occlusion_area);
            let aspect = rng.uniform(0.5, 2.0);
            let height = (area * aspect).sqrt().min(1.0);
            let width = (area / height).min(1.0);
            AugmentOp::Occlude {
                top: rng.uniform(0.0, 1.0 - height),
                left: rng.uniform(0.0, 1.0 - width),
                height,
                width,
            }
        }
        AugmentKind::Contrast => AugmentOp::Contrast {
            gamma: rng.uniform(ranges.gamma_min, ranges.gamma_max),
        },
        AugmentKind::VesselShadow => {
            let n = 1 + rng.below(ranges.vessel_count_max.max(1));
            let bands = (0..n)
                .map(|_| {
                    let bw = rng.int_inclusive(
                        ranges.vessel_width_min as i64,
                        ranges.vessel_width_max.max(ranges.vessel_width_min) as i64,
                    ) as usize;
                    let bw = bw.min(width);
                    VesselBand {
                        start: rng.below(width - bw + 1),
                        width: bw,
                        factor: rng.uniform(ranges.vessel_factor_min, ranges.vessel_factor_max) as f32,
                    }
                })
                .collect();
            AugmentOp::VesselShadow { bands }
        }
        AugmentKind::Noise => AugmentOp::Noise {
            sigma: rng.uniform(0.0, ranges.noise_sigma_max),
        },
    }
}

/// Source pixel for each destination pixel, `None` where content is
/// shifted in from outside.
fn geometric_map(op: &AugmentOp, h: usize, w: usize) -> Vec<Option<usize>> {
    let mut map = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let src = match *op {
                AugmentOp::HFlip => Some((r as i64, (w - 1 - c) as i64)),
                AugmentOp::Translate { dx, dy } => Some((r as i64 - dy as i64, c as i64 - dx as i64)),
                AugmentOp::Scale { factor } => {
                    let cy = (h as f64 - 1.0) / 2.0;
                    let cx = (w as f64 - 1.0) / 2.0;
                    let sr = ((r as f64 - cy) / factor + cy).round();
                    let sc = ((c as f64 - cx) / factor + cx).round();
                    Some((sr as i64, sc as i64))
                }
                _ => Some((r as i64, c as i64)),
            };
            map.push(src.and_then(|(sr, sc)| {
                (sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w)
                    .then(|| sr as usize * w + sc as usize)
            }));
        }
    }
    map
}

fn remap_column(op: &AugmentOp, c: f64, w: usize) -> f64 {
    match *op {
        AugmentOp::HFlip => (w - 1) as f64 - c,
        AugmentOp::Translate { dx, .. } => c - dx as f64,
        AugmentOp::Scale { factor } => {
            let cx = (w as f64 - 1.0) / 2.0;
            ((c - cx) / factor + cx).round()
        }
        _ => c,
    }
}

fn remap_contours(op: &AugmentOp, comp: &Composite) -> crate::phantom::Segmentation {
    let w = comp.width;
    let mut seg = comp.contours.clone();
    for j in 0..crate::phantom::N_BOUNDARIES {
        let src = comp.contours.boundary(j);
        let out = seg.boundary_mut(j);
        for (c, slot) in out.iter_mut().enumerate() {
            let sc = remap_column(op, c as f64, w).clamp(0.0, (w - 1) as f64) as usize;
            *slot = match *op {
                AugmentOp::Translate { dy, .. } => src[sc] + dy as f64,
                AugmentOp::Scale { factor } => {
                    let cy = (comp.height as f64 - 1.0) / 2.0;
                    (src[sc] - cy) * factor + cy
                }
                _ => src[sc],
            };
        }
    }
    seg
}

/// Applies `op`. `rng` is only consumed by the noise transform.
pub fn apply(op: &AugmentOp, comp: &Composite, rng: &mut Rng) -> Composite {
    let (h, w) = (comp.height, comp.width);
    match op {
        AugmentOp::Identity => comp.clone(),
        AugmentOp::HFlip | AugmentOp::Translate { .. } | AugmentOp::Scale { .. } => {
            let map = geometric_map(op, h, w);
            let mut out = comp.clone();
            for ch in 0..3 {
                let src = comp.channel(ch);
                let dst = out.channel_mut(ch);
                for (d, m) in dst.iter_mut().zip(&map) {
                    *d = m.map_or(0.0, |i| src[i]);
                }
            }
            out.contours = remap_contours(op, comp);
            out
        }
        AugmentOp::Occlude {
            top,
            left,
            height,
            width,
        } => {
            let mut out = comp.clone();
            let r0 = (top * h as f64).floor() as usize;
            let c0 = (left * w as f64).floor() as usize;
            let r1 = (r0 + (height * h as f64).round() as usize).min(h);
            let c1 = (c0 + (width * w as f64).round() as usize).min(w);
            let raw = out.channel_mut(0);
            for r in r0..r1 {
                raw[r * w + c0..r * w + c1].iter_mut().for_each(|v| *v = 0.0);
            }
            out
        }
        AugmentOp::Contrast { gamma } => {
            let mut out = comp.clone();
            let g = *gamma as f32;
            out.channel_mut(0)
                .iter_mut()
                .for_each(|v| *v = v.powf(g).clamp(0.0, 1.0));
            out
        }
        AugmentOp::VesselShadow { bands } => {
            let mut out = comp.clone();
            let raw = out.channel_mut(0);
            for band in bands {
                for c in band.start..(band.start + band.width).min(w) {
                    for r in 0..h {
                        raw[r * w + c] = (raw[r * w + c] * band.factor).clamp(0.0, 1.0);
                    }
                }
            }
            out
        }
        AugmentOp::Noise { sigma } => {
            let mut out = comp.clone();
            out.channel_mut(0).iter_mut().for_each(|v| {
                *v = (*v as f64 + sigma * rng.normal()).clamp(0.0, 1.0) as f32;
            });
            out
        }
    }
}

/// Samples an op and applies it.
pub fn augment(comp: &Composite, ranges: &AugmentRanges, rng: &mut Rng) -> Composite {
    let op = sample_op(rng, ranges, comp.width);
    apply(&op, comp, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_bscan, PhantomSpec};
    use crate::preprocess::{preprocess, default_mask_gains, ChannelMode};

    fn composite(seed: u64) -> Composite {
        let b = generate_bscan(&PhantomSpec::with_geometry(81, 64), &mut Rng::new(seed)).unwrap();
        preprocess(&b, 64, ChannelMode::Composite, &default_mask_gains()).unwrap()
    }

    #[test]
    fn fixed_seed_fixed_sequence() {
        let ranges = AugmentRanges::default();
        let a: Vec<AugmentOp> = {
            let mut rng = Rng::new(3);
            (0..50).map(|_| sample_op(&mut rng, &ranges, 512)).collect()
        };
        let b: Vec<AugmentOp> = {
            let mut rng = Rng::new(3);
            (0..50).map(|_| sample_op(&mut rng, &ranges, 512)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn kinds_are_uniform() {
        let ranges = AugmentRanges::default();
        let mut rng = Rng::new(17);
        let mut counts = std::collections::HashMap::new();
        let n = 10_000;
        for _ in 0..n {
            *counts.entry(sample_op(&mut rng, &ranges, 512).kind()).or_insert(0usize) += 1;
        }
        for kind in AugmentKind::ALL {
            let f = counts[&kind] as f64 / n as f64;
            assert!((f - 0.125).abs() <= 0.02, "{kind:?}: {f}");
        }
    }

    #[test]
    fn sampled_params_in_range() {
        let ranges = AugmentRanges::default();
        let mut rng = Rng::new(5);
        for _ in 0..2000 {
            match sample_op(&mut rng, &ranges, 512) {
                AugmentOp::Translate { dx, dy } => assert!(dx.abs() <= 16 && dy.abs() <= 16),
                AugmentOp::Scale { factor } => assert!((0.9..=1.1).contains(&factor)),
                AugmentOp::Occlude { height, width, .. } => {
                    assert!(height * width <= 0.15 + 1e-12)
                }
                AugmentOp::Contrast { gamma } => assert!((0.7..=1.4).contains(&gamma)),
                AugmentOp::VesselShadow { bands } => {
                    assert!((1..=4).contains(&bands.len()));
                    for b in bands {
                        assert!((4..=12).contains(&b.width));
                        assert!((0.3..=0.7).contains(&b.factor));
                        assert!(b.start + b.width <= 512);
                    }
                }
                AugmentOp::Noise { sigma } => assert!(sigma <= 0.05),
                _ => {}
            }
        }
    }

    #[test]
    fn identity_and_double_flip() {
        let c = composite(1);
        let mut rng = Rng::new(0);
        assert_eq!(apply(&AugmentOp::Identity, &c, &mut rng), c);
        let once = apply(&AugmentOp::HFlip, &c, &mut rng);
        assert_ne!(once, c);
        assert_eq!(apply(&AugmentOp::HFlip, &once, &mut rng), c);
    }

    #[test]
    fn vessel_shadow_touches_only_its_columns() {
        let c = composite(2);
        let op = AugmentOp::VesselShadow {
            bands: vec![VesselBand {
                start: 10,
                width: 3,
                factor: 0.5,
            }],
        };
        let out = apply(&op, &c, &mut Rng::new(0));
        assert_eq!(out.channel(1), c.channel(1));
        assert_eq!(out.channel(2), c.channel(2));
        for r in 0..64 {
            for col in 0..64 {
                let (a, b) = (c.channel(0)[r * 64 + col], out.channel(0)[r * 64 + col]);
                if (10..13).contains(&col) {
                    assert_eq!(b, a * 0.5);
                } else {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn geometric_ops_share_one_mapping() {
        // Encode the pixel index in every channel; each op must move all
        // three channels identically.
        let mut c = composite(3);
        let n = c.plane_len();
        for ch in 0..3 {
            for (i, v) in c.channel_mut(ch).iter_mut().enumerate() {
                *v = (i + 1) as f32 / n as f32;
            }
        }
        let ops = [
            AugmentOp::HFlip,
            AugmentOp::Translate { dx: 3, dy: -2 },
            AugmentOp::Scale { factor: 1.07 },
            AugmentOp::Scale { factor: 0.93 },
        ];
        for op in ops {
            let out = apply(&op, &c, &mut Rng::new(0));
            assert_eq!(out.channel(0), out.channel(1));
            assert_eq!(out.channel(1), out.channel(2));
        }
    }

    #[test]
    fn translate_moves_content() {
        let c = composite(4);
        let out = apply(&AugmentOp::Translate { dx: 2, dy: 1 }, &c, &mut Rng::new(0));
        assert_eq!(out.channel(2)[11 * 64 + 12], c.channel(2)[10 * 64 + 10]);
        assert_eq!(out.channel(0)[0], 0.0);
        assert_eq!(out.contours.at(3, 12), c.contours.at(3, 10) + 1.0);
    }

    #[test]
    fn raw_only_ops_keep_other_channels() {
        let c = composite(5);
        let ranges = AugmentRanges::for_size(64);
        let mut rng = Rng::new(6);
        for _ in 0..200 {
            let op = sample_op(&mut rng, &ranges, 64);
            let out = apply(&op, &c, &mut rng);
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
            if op.scope() == ChannelScope::RawOnly {
                assert_eq!(out.channel(1), c.channel(1));
                assert_eq!(out.channel(2), c.channel(2));
            }
        }
    }
}
