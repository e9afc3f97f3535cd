//! Grad-CAM saliency and its overlap with retinal layer regions.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{backward, forward, Batch, ModelError, ParamSet, N_CLASSES};
use crate::phantom::{layer_name, Segmentation, N_LAYERS};
use crate::preprocess::Composite;
use crate::store::{Label, Rng};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("non-finite Grad-CAM gradients")]
    NonFinite,
    #[error("extent mismatch: {0}")]
    Extent(String),
    #[error("no saliency maps to aggregate")]
    Empty,
    #[error("class index {0} out of range")]
    BadClass(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, in `[0, 1]`, max 1 unless all zero.
    pub values: Vec<f32>,
    pub class_index: usize,
}

/// Final-layer activations `A` (`[C, Ho, Wo]`) and the Grad-CAM channel
/// weights: the spatial mean of `d logit_class / d A_k`.
#[derive(Debug, Clone)]
pub struct CamInputs {
    pub activation: Vec<f64>,
    pub channels: usize,
    pub ho: usize,
    pub wo: usize,
    pub alphas: Vec<f64>,
}

pub fn cam_inputs(p: &ParamSet, x: &Composite, class_index: usize) -> Result<CamInputs, ExplainError> {
    if class_index >= N_CLASSES {
        return Err(ExplainError::BadClass(class_index));
    }
    let batch = Batch::from_composites(&[x])?;
    let cache = forward(p, &batch, false, &mut Rng::new(0))?;
    let mut onehot = [0.0; N_CLASSES];
    onehot[class_index] = 1.0;
    let (_, d_act) = backward(p, &cache, &[onehot]);
    if d_act.iter().any(|v| !v.is_finite()) {
        return Err(ExplainError::NonFinite);
    }
    let (act, ho, wo) = cache.final_activation();
    let spatial = ho * wo;
    let channels = act.len() / spatial;
    let alphas = d_act
        .chunks(spatial)
        .map(|g| g.iter().sum::<f64>() / spatial as f64)
        .collect();
    Ok(CamInputs {
        activation: act.to_vec(),
        channels,
        ho,
        wo,
        alphas,
    })
}

/// Bilinear resize with half-pixel centres; source coordinates clamp to
/// the edge.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|x| coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// `relu(sum_k alpha_k A_k)`, upsampled to the input extents and divided
/// by its maximum.
pub fn grad_cam(p: &ParamSet, x: &Composite, class_index: usize) -> Result<SaliencyMap, ExplainError> {
    let ci = cam_inputs(p, x, class_index)?;
    let spatial = ci.ho * ci.wo;
    let mut cam = vec![0.0; spatial];
    for (k, &a) in ci.alphas.iter().enumerate() {
        for (c, v) in cam.iter_mut().zip(&ci.activation[k * spatial..(k + 1) * spatial]) {
            *c += a * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let up = upsample_bilinear(&cam, ci.ho, ci.wo, x.height, x.width);
    let max = up.iter().cloned().fold(0.0_f64, f64::max);
    let values = if max > 0.0 {
        up.iter().map(|v| (v / max) as f32).collect()
    } else {
        vec![0.0; up.len()]
    };
    Ok(SaliencyMap {
        height: x.height,
        width: x.width,
        values,
        class_index,
    })
}

/// Pixels with value `>= tau`.
pub fn threshold_mask(s: &SaliencyMap, tau: f64) -> Vec<bool> {
    s.values.iter().map(|&v| v as f64 >= tau).collect()
}

/// Binary masks of the 10 layers and the central macular subfield.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRegions {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<Vec<bool>>,
    pub macula: Vec<bool>,
}

/// Layer `k` holds rows `round(b_k) <= r < round(b_{k+1})` of each column.
/// The macula is the union of all layers over columns with
/// `|c - (W-1)/2| <= halfwidth`.
pub fn layer_regions(seg: &Segmentation, height: usize, width: usize, halfwidth: f64) -> Result<LayerRegions, ExplainError> {
    if seg.width() != width {
        return Err(ExplainError::Extent(format!(
            "segmentation has {} columns, image {width}",
            seg.width()
        )));
    }
    let clamp_row = |v: f64| v.round().clamp(0.0, height as f64) as usize;
    let mut layers = vec![vec![false; height * width]; N_LAYERS];
    let mut macula = vec![false; height * width];
    let centre = (width as f64 - 1.0) / 2.0;
    for c in 0..width {
        let in_sub = (c as f64 - centre).abs() <= halfwidth;
        for (k, layer) in layers.iter_mut().enumerate() {
            let top = clamp_row(seg.at(k, c));
            let bottom = clamp_row(seg.at(k + 1, c));
            for r in top..bottom {
                layer[r * width + c] = true;
                if in_sub {
                    macula[r * width + c] = true;
                }
            }
        }
    }
    Ok(LayerRegions {
        height,
        width,
        layers,
        macula,
    })
}

/// Overlap between a saliency mask `S` and a region `L`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Overlap {
    pub iou: f64,
    pub dice: f64,
    /// `|S ∩ L| / |L|`.
    pub fill: f64,
    /// `L` was empty; all three metrics are 0.
    pub empty_region: bool,
}

/// Raw pixel counts, kept so pooled metrics can be formed across scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlapCounts {
    pub intersection: usize,
    pub mask: usize,
    pub region: usize,
}

impl OverlapCounts {
    pub fn of(mask: &[bool], region: &[bool]) -> Self {
        let mut c = Self::default();
        for (&s, &l) in mask.iter().zip(region) {
            c.mask += s as usize;
            c.region += l as usize;
            c.intersection += (s && l) as usize;
        }
        c
    }

    pub fn add(&mut self, o: &Self) {
        self.intersection += o.intersection;
        self.mask += o.mask;
        self.region += o.region;
    }

    pub fn metrics(&self) -> Overlap {
        if self.region == 0 {
            return Overlap {
                empty_region: true,
                ..Overlap::default()
            };
        }
        let i = self.intersection as f64;
        let union = (self.mask + self.region - self.intersection) as f64;
        Overlap {
            iou: i / union,
            dice: 2.0 * i / (self.mask + self.region) as f64,
            fill: i / self.region as f64,
            empty_region: false,
        }
    }
}

pub fn overlap_pair(mask: &[bool], region: &[bool]) -> Overlap {
    OverlapCounts::of(mask, region).metrics()
}

/// Overlaps for the 10 layers and the macula.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOverlap {
    pub layers: Vec<Overlap>,
    pub macula: Overlap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCounts {
    pub layers: Vec<OverlapCounts>,
    pub macula: OverlapCounts,
}

impl LayerCounts {
    pub fn metrics(&self) -> LayerOverlap {
        LayerOverlap {
            layers: self.layers.iter().map(OverlapCounts::metrics).collect(),
            macula: self.macula.metrics(),
        }
    }
}

pub fn overlap_counts(mask: &[bool], regions: &LayerRegions) -> Result<LayerCounts, ExplainError> {
    if mask.len() != regions.height * regions.width {
        return Err(ExplainError::Extent(format!(
            "mask has {} pixels, regions {}",
            mask.len(),
            regions.height * regions.width
        )));
    }
    Ok(LayerCounts {
        layers: regions.layers.iter().map(|l| OverlapCounts::of(mask, l)).collect(),
        macula: OverlapCounts::of(mask, &regions.macula),
    })
}

pub fn overlap(mask: &[bool], regions: &LayerRegions) -> Result<LayerOverlap, ExplainError> {
    Ok(overlap_counts(mask, regions)?.metrics())
}

/// Number of pixels marked per image: `ceil(percent / 100 * n)`.
pub fn top_count(n_pixels: usize, percent: f64) -> usize {
    ((percent / 100.0 * n_pixels as f64).ceil() as usize).min(n_pixels)
}

/// Per-pixel fraction of images in which the pixel is among that image's
/// `percent`% most salient. Ties break toward the lower row-major index.
pub fn aggregate_top(maps: &[&SaliencyMap], percent: f64) -> Result<Vec<f32>, ExplainError> {
    let first = maps.first().ok_or(ExplainError::Empty)?;
    let n = first.height * first.width;
    if maps.iter().any(|m| m.height != first.height || m.width != first.width) {
        return Err(ExplainError::Extent("saliency maps differ in size".into()));
    }
    let k = top_count(n, percent);
    let mut counts = vec![0u32; n];
    for m in maps {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| m.values[b].total_cmp(&m.values[a]).then(a.cmp(&b)));
        for &i in &idx[..k] {
            counts[i] += 1;
        }
    }
    let total = maps.len() as f32;
    Ok(counts.into_iter().map(|c| c as f32 / total).collect())
}

/// [`aggregate_top`] at 5%.
pub fn aggregate_top5(maps: &[&SaliencyMap]) -> Result<Vec<f32>, ExplainError> {
    aggregate_top(maps, 5.0)
}

/// One explained test scan.
#[derive(Debug, Clone)]
pub struct ExplainedScan {
    pub label: Label,
    pub predicted: Label,
    pub counts: LayerCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassOverlapTable {
    pub cn: LayerOverlap,
    pub ad: LayerOverlap,
    pub n_cn: usize,
    pub n_ad: usize,
    pub pooled: bool,
}

fn mean_overlap(items: &[LayerOverlap]) -> LayerOverlap {
    let n = items.len().max(1) as f64;
    let avg = |get: &dyn Fn(&LayerOverlap) -> Overlap| {
        let mut o = Overlap::default();
        for it in items {
            let v = get(it);
            o.iou += v.iou / n;
            o.dice += v.dice / n;
            o.fill += v.fill / n;
        }
        o.empty_region = !items.is_empty() && items.iter().all(|it| get(it).empty_region);
        o
    };
    LayerOverlap {
        layers: (0..N_LAYERS).map(|k| avg(&|it: &LayerOverlap| it.layers[k])).collect(),
        macula: avg(&|it: &LayerOverlap| it.macula),
    }
}

fn pooled_overlap(items: &[&LayerCounts]) -> LayerOverlap {
    let mut sum = LayerCounts {
        layers: vec![OverlapCounts::default(); N_LAYERS],
        macula: OverlapCounts::default(),
    };
    for it in items {
        for (s, c) in sum.layers.iter_mut().zip(&it.layers) {
            s.add(c);
        }
        sum.macula.add(&it.macula);
    }
    sum.metrics()
}

/// Per-class overlap: the mean of per-scan metrics, or metrics of pixel
/// counts pooled over the class when `pooled` is set.
pub fn class_overlap_table(scans: &[ExplainedScan], pooled: bool) -> ClassOverlapTable {
    let of = |label: Label| -> (LayerOverlap, usize) {
        let sel: Vec<&ExplainedScan> = scans.iter().filter(|s| s.label == label).collect();
        let table = if pooled {
            pooled_overlap(&sel.iter().map(|s| &s.counts).collect::<Vec<_>>())
        } else {
            mean_overlap(&sel.iter().map(|s| s.counts.metrics()).collect::<Vec<_>>())
        };
        (table, sel.len())
    };
    let (cn, n_cn) = of(Label::Cn);
    let (ad, n_ad) = of(Label::Ad);
    ClassOverlapTable {
        cn,
        ad,
        n_cn,
        n_ad,
        pooled,
    }
}

impl ClassOverlapTable {
    /// Rows: the 10 layers then `Macula`; columns: IoU, Dice and Fill for
    /// CN and AD.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "region", "IoU CN", "IoU AD", "Dice CN", "Dice AD", "Fill CN", "Fill AD"
        );
        let mut row = |name: &str, cn: &Overlap, ad: &Overlap| {
            let _ = writeln!(
                out,
                "{:<12} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                name, cn.iou, ad.iou, cn.dice, ad.dice, cn.fill, ad.fill
            );
        };
        for k in 0..N_LAYERS {
            row(layer_name(k), &self.cn.layers[k], &self.ad.layers[k]);
        }
        row("Macula", &self.cn.macula, &self.ad.macula);
        let _ = writeln!(
            out,
            "scans: CN {} AD {}; {}",
            self.n_cn,
            self.n_ad,
            if self.pooled { "pooled pixel counts" } else { "mean of per-scan metrics" }
        );
        out
    }
}

/// Confusion-cell tag of an explained scan: `TP`, `TN`, `FP` or `FN`.
pub fn outcome_tag(label: Label, predicted: Label) -> &'static str {
    match (label, predicted) {
        (Label::Ad, Label::Ad) => "TP",
        (Label::Cn, Label::Cn) => "TN",
        (Label::Cn, Label::Ad) => "FP",
        (Label::Ad, Label::Cn) => "FN",
    }
}
