//! Synthetic layered retinal B-scans with ground-truth boundaries.
//!
//! Geometry is specified at the reference slice size of 650 rows (depth) by
//! 512 columns (lateral) and scaled proportionally for other sizes. Each scan
//! is built top-down: a common low-frequency curvature shared by all
//! boundaries, a small independent wobble per boundary, a Gaussian foveal
//! pit that thins the inner layers around the centre column, and, for AD
//! scans, thinning of one target layer inside the configured region.

use std::path::Path;

use thiserror::Error;

use crate::store::manifest::{Eye, Label, Manifest, ManifestError, Sex, SubjectRecord};
use crate::store::tensor::{read_tensor, write_tensor, TensorError, TensorFile};
use crate::store::Rng;

pub const N_BOUNDARIES: usize = 11;
pub const N_LAYERS: usize = 10;

pub const REFERENCE_HEIGHT: usize = 650;
pub const REFERENCE_WIDTH: usize = 512;

/// Boundary names, shallowest first.
pub const BOUNDARY_NAMES: [&str; N_BOUNDARIES] = [
    "ILM", "RNFL-GCL", "GCL-IPL", "IPL-INL", "INL-OPL", "OPL-HFL", "BMEIS", "IS/OSJ", "IB_OPR",
    "IB_RPE", "OB_RPE",
];

/// Layer `k` lies between boundaries `k` and `k + 1` and is named after its
/// lower boundary.
pub fn layer_name(k: usize) -> &'static str {
    BOUNDARY_NAMES[k + 1]
}

/// Layer between BMEIS and IS/OSJ.
pub const DEFAULT_TARGET_LAYER: usize = 6;

pub const ILM: usize = 0;
pub const OB_RPE: usize = N_BOUNDARIES - 1;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Eleven boundary curves, each a real-valued row index per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    width: usize,
    boundaries: Vec<Vec<f64>>,
}

impl Segmentation {
    pub fn new(boundaries: Vec<Vec<f64>>) -> Result<Self, PhantomError> {
        if boundaries.len() != N_BOUNDARIES {
            return Err(PhantomError::InvalidSpec(format!(
                "expected {N_BOUNDARIES} boundaries, got {}",
                boundaries.len()
            )));
        }
        let width = boundaries[0].len();
        if width == 0 || boundaries.iter().any(|b| b.len() != width) {
            return Err(PhantomError::InvalidSpec("ragged boundary lengths".into()));
        }
        if boundaries.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PhantomError::InvalidSpec("non-finite boundary value".into()));
        }
        Ok(Self { width, boundaries })
    }

    /// Flat boundaries at the given rows.
    pub fn flat(rows: [f64; N_BOUNDARIES], width: usize) -> Self {
        Self {
            width,
            boundaries: rows.iter().map(|&r| vec![r; width]).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn boundary(&self, j: usize) -> &[f64] {
        &self.boundaries[j]
    }

    pub fn boundary_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.boundaries[j]
    }

    pub fn at(&self, j: usize, c: usize) -> f64 {
        self.boundaries[j][c]
    }

    pub fn is_monotone(&self) -> bool {
        (0..self.width).all(|c| (1..N_BOUNDARIES).all(|j| self.at(j, c) >= self.at(j - 1, c)))
    }

    pub fn within(&self, height: usize) -> bool {
        self.boundaries
            .iter()
            .flatten()
            .all(|&v| v >= 0.0 && v < height as f64)
    }

    /// Thickness of layer `k` at column `c`.
    pub fn thickness(&self, k: usize, c: usize) -> f64 {
        self.at(k + 1, c) - self.at(k, c)
    }

    /// Adds a per-column offset to every boundary.
    pub fn shift_columns(&mut self, offsets: &[f64]) {
        for b in &mut self.boundaries {
            for (v, o) in b.iter_mut().zip(offsets) {
                *v += o;
            }
        }
    }

    pub fn shift_all(&mut self, offset: f64) {
        self.boundaries.iter_mut().flatten().for_each(|v| *v += offset);
    }

    /// Keeps columns `start..start + len`.
    pub fn slice_columns(&self, start: usize, len: usize) -> Self {
        Self {
            width: len,
            boundaries: self
                .boundaries
                .iter()
                .map(|b| b[start..start + len].to_vec())
                .collect(),
        }
    }

    pub fn to_tensor(&self) -> TensorFile {
        let data = self.boundaries.iter().flatten().map(|&v| v as f32).collect();
        TensorFile::from_f32(vec![N_BOUNDARIES, self.width], data).expect("consistent shape")
    }

    pub fn from_tensor(t: TensorFile) -> Result<Self, PhantomError> {
        let (dims, data) = t.into_f32()?;
        if dims.len() != 2 || dims[0] != N_BOUNDARIES {
            return Err(PhantomError::InvalidSpec(format!(
                "segmentation tensor must be {N_BOUNDARIES}xW, got {dims:?}"
            )));
        }
        Self::new(
            data.chunks(dims[1])
                .map(|row| row.iter().map(|&v| v as f64).collect())
                .collect(),
        )
    }
}

/// One grayscale slice, rows = depth, plus its boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct BScan {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u16>,
    pub contours: Segmentation,
}

impl BScan {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<u16>,
        contours: Segmentation,
    ) -> Result<Self, PhantomError> {
        if pixels.len() != height * width || contours.width() != width {
            return Err(PhantomError::InvalidSpec(format!(
                "pixel/contour extents disagree with {height}x{width}"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            contours,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.pixels[r * self.width + c]
    }

    /// Writes the image as a u16 tensor at `path` and the contours as an
    /// f32 `11 x W` tensor at `path + ".seg"`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PhantomError> {
        let path = path.as_ref();
        let img = TensorFile::from_u16(vec![self.height, self.width], self.pixels.clone())?;
        write_tensor(path, &img)?;
        write_tensor(seg_path(path), &self.contours.to_tensor())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PhantomError> {
        let path = path.as_ref();
        let (dims, pixels) = read_tensor(path)?.into_u16()?;
        if dims.len() != 2 {
            return Err(PhantomError::InvalidSpec(format!("image must be 2-D, got {dims:?}")));
        }
        let contours = Segmentation::from_tensor(read_tensor(seg_path(path))?)?;
        BScan::new(dims[0], dims[1], pixels, contours)
    }
}

/// Sidecar path for a tensor's contours.
pub fn seg_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".seg");
    s.into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Global,
    CentralSubfield,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalMode {
    /// Target layer thins and every boundary below moves up.
    ShiftBelow,
    /// Target layer thins and the layer below absorbs the difference, so
    /// only the boundary between them moves.
    Compensated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub target_layer: usize,
    pub thinning_fraction: f64,
    pub region: Region,
    pub mode: SignalMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Depth of the ILM in the absence of curvature and pit.
    pub top_row: f64,
    pub layer_thickness: [f64; N_LAYERS],
    /// Mean intensity per layer, as a fraction of `full_scale`.
    pub layer_base_intensity: [f64; N_LAYERS],
    pub background_intensity: f64,
    pub full_scale: f64,
    pub foveal_pit_depth: f64,
    pub foveal_pit_width: f64,
    /// Peak amplitude of the shared curvature; zero gives flat boundaries.
    pub curvature_amplitude: f64,
    /// Number of cosine terms in the curvature, at most 5.
    pub curvature_terms: usize,
    /// Peak amplitude of the independent per-boundary wobble.
    pub boundary_jitter: f64,
    pub speckle_sigma: f64,
    /// Half-width, in columns, of the central subfield.
    pub subfield_halfwidth: f64,
    pub signal: Signal,
    pub class: Label,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::with_geometry(REFERENCE_HEIGHT, REFERENCE_WIDTH)
    }
}

impl PhantomSpec {
    /// Default anatomy scaled to `height x width`.
    pub fn with_geometry(height: usize, width: usize) -> Self {
        let sv = height as f64 / REFERENCE_HEIGHT as f64;
        let sh = width as f64 / REFERENCE_WIDTH as f64;
        let thickness = [32.0, 30.0, 26.0, 26.0, 18.0, 34.0, 36.0, 22.0, 20.0, 26.0];
        Self {
            height,
            width,
            top_row: 170.0 * sv,
            layer_thickness: thickness.map(|t| t * sv),
            layer_base_intensity: [0.80, 0.45, 0.60, 0.25, 0.55, 0.20, 0.90, 0.40, 0.75, 0.95],
            background_intensity: 0.05,
            full_scale: 40000.0,
            foveal_pit_depth: 60.0 * sv,
            foveal_pit_width: 40.0 * sh,
            curvature_amplitude: 24.0 * sv,
            curvature_terms: 3,
            boundary_jitter: 1.5 * sv,
            speckle_sigma: 0.25,
            subfield_halfwidth: 42.0 * sh,
            signal: Signal {
                target_layer: DEFAULT_TARGET_LAYER,
                thinning_fraction: 0.0,
                region: Region::CentralSubfield,
                mode: SignalMode::ShiftBelow,
            },
            class: Label::Cn,
        }
    }

    /// Noise-free, flat variant useful as an analytic reference.
    pub fn noiseless(mut self) -> Self {
        self.curvature_amplitude = 0.0;
        self.boundary_jitter = 0.0;
        self.foveal_pit_depth = 0.0;
        self.speckle_sigma = 0.0;
        self
    }

    pub fn with_class(mut self, class: Label) -> Self {
        self.class = class;
        self
    }

    /// Columns that belong to the central subfield.
    pub fn in_subfield(&self, c: usize) -> bool {
        in_central_subfield(c, self.width, self.subfield_halfwidth)
    }

    fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.height < 2 || self.width < 2 {
            return bad(format!("extents {}x{} too small", self.height, self.width));
        }
        let s = &self.signal;
        if !(0.0..1.0).contains(&s.thinning_fraction) {
            return bad(format!(
                "thinning_fraction {} must be in [0, 1)",
                s.thinning_fraction
            ));
        }
        if s.target_layer >= N_LAYERS {
            return bad(format!("target layer {} out of range", s.target_layer));
        }
        if s.mode == SignalMode::Compensated && s.target_layer + 1 >= N_LAYERS {
            return bad("compensated thinning needs a layer below the target".into());
        }
        if self.curvature_terms > 5 {
            return bad("at most 5 curvature terms".into());
        }
        if self.layer_thickness.iter().any(|&t| !(t >= 0.0)) {
            return bad("layer thickness must be non-negative".into());
        }
        let inner: f64 = self.layer_thickness[..5].iter().sum();
        if self.foveal_pit_depth > inner {
            return bad("foveal pit deeper than the inner retina".into());
        }
        if self.speckle_sigma < 0.0 || self.boundary_jitter < 0.0 || self.curvature_amplitude < 0.0
        {
            return bad("noise amplitudes must be non-negative".into());
        }
        Ok(())
    }
}

/// `|c - centre| <= halfwidth` with centre `(width - 1) / 2`.
pub fn in_central_subfield(c: usize, width: usize, halfwidth: f64) -> bool {
    (c as f64 - (width as f64 - 1.0) / 2.0).abs() <= halfwidth
}

fn cosine_series(rng: &mut Rng, terms: usize, amplitude: f64, width: usize) -> Vec<f64> {
    let coeffs: Vec<(f64, f64)> = (1..=terms)
        .map(|j| {
            let a = rng.uniform(-amplitude, amplitude) / j as f64;
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            (a, phase)
        })
        .collect();
    (0..width)
        .map(|c| {
            coeffs
                .iter()
                .enumerate()
                .map(|(j, &(a, phase))| {
                    let freq = (j + 1) as f64 * std::f64::consts::TAU / width as f64;
                    a * (freq * c as f64 + phase).cos()
                })
                .sum::<f64>()
        })
        .collect()
}

/// Boundary curves for one scan. Consumes the same random draws regardless
/// of class, so a CN and an AD scan with zero thinning are identical.
fn generate_contours(spec: &PhantomSpec, rng: &mut Rng) -> Result<Segmentation, PhantomError> {
    let w = spec.width;
    let terms = if spec.curvature_amplitude > 0.0 {
        spec.curvature_terms
    } else {
        0
    };
    let curvature = cosine_series(rng, terms, spec.curvature_amplitude / 2.0, w);
    let jitter: Vec<Vec<f64>> = (0..N_BOUNDARIES)
        .map(|_| {
            if spec.boundary_jitter > 0.0 {
                cosine_series(rng, 2, spec.boundary_jitter / 1.5, w)
            } else {
                vec![0.0; w]
            }
        })
        .collect();

    let inner: f64 = spec.layer_thickness[..5].iter().sum();
    let pit_fraction = if inner > 0.0 {
        spec.foveal_pit_depth / inner
    } else {
        0.0
    };
    let centre = (w as f64 - 1.0) / 2.0;
    let sig = &spec.signal;
    let thin = spec.class == Label::Ad && sig.thinning_fraction > 0.0;

    let mut boundaries = vec![vec![0.0; w]; N_BOUNDARIES];
    for c in 0..w {
        let pit = if spec.foveal_pit_width > 0.0 {
            let d = (c as f64 - centre) / spec.foveal_pit_width;
            (-0.5 * d * d).exp()
        } else {
            0.0
        };
        let mut t: [f64; N_LAYERS] = std::array::from_fn(|k| {
            let base = spec.layer_thickness[k];
            let pitted = if k < 5 { base * (1.0 - pit_fraction * pit) } else { base };
            pitted + jitter[k + 1][c] - jitter[k][c]
        });
        let in_region = match sig.region {
            Region::Global => true,
            Region::CentralSubfield => spec.in_subfield(c),
        };
        if thin && in_region {
            let removed = t[sig.target_layer] * sig.thinning_fraction;
            t[sig.target_layer] -= removed;
            if sig.mode == SignalMode::Compensated {
                t[sig.target_layer + 1] += removed;
            }
        }
        let mut y = spec.top_row + curvature[c] + spec.foveal_pit_depth * pit + jitter[0][c];
        boundaries[0][c] = y;
        for k in 0..N_LAYERS {
            y += t[k];
            boundaries[k + 1][c] = y;
        }
    }
    let seg = Segmentation::new(boundaries)?;
    if !seg.is_monotone() {
        return Err(PhantomError::InvalidSpec(
            "boundary wobble exceeds layer thickness; contours not monotone".into(),
        ));
    }
    if !seg.within(spec.height) {
        return Err(PhantomError::InvalidSpec(format!(
            "contours leave the image rows [0, {})",
            spec.height
        )));
    }
    Ok(seg)
}

/// Renders one B-scan from `spec`.
pub fn generate_bscan(spec: &PhantomSpec, rng: &mut Rng) -> Result<BScan, PhantomError> {
    spec.validate()?;
    let contours = generate_contours(spec, rng)?;
    let (h, w) = (spec.height, spec.width);
    let mut pixels = vec![0u16; h * w];
    let level = |frac: f64| frac * spec.full_scale;
    for r in 0..h {
        let row = r as f64;
        for c in 0..w {
            let mean = if row < contours.at(ILM, c) || row >= contours.at(OB_RPE, c) {
                level(spec.background_intensity)
            } else {
                let k = (1..N_BOUNDARIES)
                    .take_while(|&j| contours.at(j, c) <= row)
                    .count()
                    .min(N_LAYERS - 1);
                level(spec.layer_base_intensity[k])
            };
            let speckle = if spec.speckle_sigma > 0.0 {
                (spec.speckle_sigma * rng.normal()).exp()
            } else {
                1.0
            };
            pixels[r * w + c] = (mean * speckle).round().clamp(0.0, u16::MAX as f64) as u16;
        }
    }
    BScan::new(h, w, pixels, contours)
}

/// A generated scan and its manifest row.
#[derive(Debug, Clone)]
pub struct CohortScan {
    pub record: SubjectRecord,
    pub scan: BScan,
}

/// Generates `n_ad` AD scans and `n_cn` CN scans.
///
/// Subjects contribute one or two eyes. Every CN subject copies the age,
/// sex and instance of an AD subject (cycling through them in random
/// order), so exact matching is available for each AD subject whenever
/// there are at least as many CN subjects as AD subjects.
pub fn generate_cohort(
    n_ad: usize,
    n_cn: usize,
    template: &PhantomSpec,
    year_cap: f64,
    rng: &mut Rng,
) -> Result<Vec<CohortScan>, PhantomError> {
    if n_ad == 0 || n_cn == 0 {
        return Err(PhantomError::InvalidSpec(
            "cohort needs at least one scan per class".into(),
        ));
    }

    struct Subject {
        id: String,
        eyes: Vec<Eye>,
        age: u32,
        sex: Sex,
        instance: u8,
        label: Label,
        years: Option<f64>,
    }

    let split_eyes = |rng: &mut Rng, n_scans: usize| -> Vec<Vec<Eye>> {
        let mut out = Vec::new();
        let mut left = n_scans;
        while left > 0 {
            if left >= 2 && rng.bernoulli(0.5) {
                out.push(vec![Eye::L, Eye::R]);
                left -= 2;
            } else {
                out.push(vec![if rng.bernoulli(0.5) { Eye::L } else { Eye::R }]);
                left -= 1;
            }
        }
        out
    };

    let mut subjects = Vec::new();
    let ad_eyes = split_eyes(rng, n_ad);
    let cn_eyes = split_eyes(rng, n_cn);
    let n_ad_subjects = ad_eyes.len();
    for eyes in ad_eyes {
        let age = rng.int_inclusive(55, 79) as u32;
        let sex = if rng.bernoulli(0.5) { Sex::F } else { Sex::M };
        let instance = u8::from(rng.bernoulli(0.3));
        let years = (rng.uniform(0.0, year_cap) * 100.0).round() / 100.0;
        subjects.push(Subject {
            id: String::new(),
            eyes,
            age,
            sex,
            instance,
            label: Label::Ad,
            years: Some(years),
        });
    }
    let mut order: Vec<usize> = (0..n_ad_subjects).collect();
    for (i, eyes) in cn_eyes.into_iter().enumerate() {
        if i % n_ad_subjects == 0 {
            rng.shuffle(&mut order);
        }
        let twin = &subjects[order[i % n_ad_subjects]];
        subjects.push(Subject {
            id: String::new(),
            eyes,
            age: twin.age,
            sex: twin.sex,
            instance: twin.instance,
            label: Label::Cn,
            years: None,
        });
    }
    // Interleave classes so ids carry no label information.
    rng.shuffle(&mut subjects);
    for (i, s) in subjects.iter_mut().enumerate() {
        s.id = format!("S{:04}", i + 1);
    }

    let mut out = Vec::with_capacity(n_ad + n_cn);
    for s in &subjects {
        for &eye in &s.eyes {
            let mut scan_rng = rng.fork();
            let spec = template.clone().with_class(s.label);
            let scan = generate_bscan(&spec, &mut scan_rng)?;
            let record = SubjectRecord {
                subject_id: s.id.clone(),
                eye,
                age: s.age,
                sex: s.sex,
                instance: s.instance,
                years_to_diagnosis: s.years,
                label: s.label,
                image_path: format!("images/{}_{}_{}.oct", s.id, eye, s.instance),
            };
            out.push(CohortScan { record, scan });
        }
    }
    Ok(out)
}

/// Writes images (plus `.seg` sidecars) under `dir` and `dir/manifest.csv`.
pub fn write_cohort(dir: impl AsRef<Path>, cohort: &[CohortScan]) -> Result<Manifest, PhantomError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images")).map_err(|source| PhantomError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for item in cohort {
        item.scan.save(dir.join(&item.record.image_path))?;
    }
    let manifest = Manifest::new(cohort.iter().map(|c| c.record.clone()).collect())?;
    manifest.write(dir.join("manifest.csv"))?;
    Ok(manifest)
}
