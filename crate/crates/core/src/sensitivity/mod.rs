//! Input-gradient sensitivity of generated built land to the input factors.
//!
//! The scalar being differentiated is the mean generated built density over a
//! region of interest R, so each gradient pixel says how much that mean moves
//! per unit change of population or luminosity at that pixel.

mod knn;
mod rays;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{finite_diff_check, FdOptions, Graph, Tensor, Var};
use crate::container::{self, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::gan::{checkpoint_bytes, model_inputs, InputMode, ModelCheckpoint, Generator};
use crate::raster::{CityStack, Grid, LayerId};
use crate::stats::{label_patches, Connectivity};

pub use knn::{build_similarity_index, Neighbor, SearchStrategy, SimilarityIndex};
pub use rays::{
    aggregate_profiles, decay_summary, pixel_binned_profile, ray_angles, ray_profile, ray_profile_at_angles,
    write_aggregate_csv, AggregateRow, AngleSampling, DecayProfile, DecaySummary, RayOptions, AGGREGATE_CSV_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    UrbanCore,
    SecondaryTop3,
    Custom,
}

impl RegionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionMode::UrbanCore => "urban_core",
            RegionMode::SecondaryTop3 => "secondary_top3",
            RegionMode::Custom => "custom",
        }
    }
}

impl std::str::FromStr for RegionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "core" | "urban_core" => Ok(RegionMode::UrbanCore),
            "secondary_top3" => Ok(RegionMode::SecondaryTop3),
            other => Err(Error::Validation(format!("unknown region {other:?} (core, secondary_top3)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionOfInterest {
    pub mask: Grid,
    pub mode: RegionMode,
    pub patch_ids: Vec<u32>,
    /// Mean (row, col) of the mask pixels.
    pub centroid: (f64, f64),
}

impl RegionOfInterest {
    pub fn custom(mask: Grid) -> Result<Self> {
        Self::from_mask(mask, RegionMode::Custom, Vec::new())
    }

    fn from_mask(mask: Grid, mode: RegionMode, patch_ids: Vec<u32>) -> Result<Self> {
        let (mut n, mut sr, mut sc) = (0usize, 0.0, 0.0);
        for r in 0..mask.height() {
            for c in 0..mask.width() {
                if mask.get(r, c) > 0.5 {
                    n += 1;
                    sr += r as f64;
                    sc += c as f64;
                }
            }
        }
        if n == 0 {
            return Err(Error::Validation("empty region of interest".into()));
        }
        Ok(RegionOfInterest { mask, mode, patch_ids, centroid: (sr / n as f64, sc / n as f64) })
    }

    pub fn len(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.mask.get(row, col) > 0.5
    }

    /// The ROI pixel with the smallest total distance to all other ROI pixels.
    pub fn medoid(&self) -> (f64, f64) {
        let pts: Vec<(f64, f64)> = (0..self.mask.len())
            .filter(|&i| self.mask.data()[i] > 0.5)
            .map(|i| ((i / self.mask.width()) as f64, (i % self.mask.width()) as f64))
            .collect();
        let cost = |p: &(f64, f64)| pts.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).sum::<f64>();
        let mut best = (f64::INFINITY, pts[0]);
        for p in &pts {
            let c = cost(p);
            if c < best.0 {
                best = (c, *p);
            }
        }
        best.1
    }
}

/// Main urban core (largest patch) or the union of the patches ranked 2–4.
///
/// Equal sizes rank by the row-major index of the patch's first pixel.
pub fn region_select(built: &Grid, mode: RegionMode, threshold: f32, connectivity: Connectivity) -> Result<RegionOfInterest> {
    let labeling = label_patches(built, threshold, connectivity);
    let needed = match mode {
        RegionMode::UrbanCore => 1,
        RegionMode::SecondaryTop3 => 4,
        RegionMode::Custom => return Err(Error::Validation("custom regions are built from a mask".into())),
    };
    let found = labeling.num_patches();
    if found < needed {
        return Err(Error::InsufficientPatches { needed, found });
    }
    // Labels are issued in row-major order of first pixel, so the label is the tie-break.
    let mut ranked: Vec<u32> = (1..=found as u32).collect();
    ranked.sort_by_key(|&l| (std::cmp::Reverse(labeling.size_of(l).unwrap_or(0)), l));
    let chosen: Vec<u32> = match mode {
        RegionMode::UrbanCore => ranked[..1].to_vec(),
        _ => ranked[1..4].to_vec(),
    };
    let mask = Grid::new(
        built.width(),
        built.height(),
        labeling.labels().iter().map(|l| if chosen.contains(l) { 1.0 } else { 0.0 }).collect(),
    )?;
    RegionOfInterest::from_mask(mask, mode, chosen)
}

/// A differentiable map from a `[1,C,H,W]` input to a `[1,1,H,W]` built map.
pub trait GradientModel {
    fn input_mode(&self) -> InputMode;
    fn forward(&self, g: &mut Graph<f64>, x: Var) -> Result<Var>;
}

/// A trained generator evaluated in 64-bit without dropout.
pub struct CheckpointModel {
    generator: Generator<f64>,
    mode: InputMode,
    pub id: String,
}

impl CheckpointModel {
    pub fn new(ckpt: &ModelCheckpoint) -> Result<Self> {
        Ok(CheckpointModel {
            generator: ckpt.generator().cast(),
            mode: ckpt.config.input_mode,
            id: checkpoint_id(ckpt)?,
        })
    }

    pub fn from_generator(generator: &Generator<f32>, mode: InputMode, id: impl Into<String>) -> Self {
        CheckpointModel { generator: generator.cast(), mode, id: id.into() }
    }
}

impl GradientModel for CheckpointModel {
    fn input_mode(&self) -> InputMode {
        self.mode
    }

    fn forward(&self, g: &mut Graph<f64>, x: Var) -> Result<Var> {
        let params = crate::gan::net::bind(g, self.generator.params(), false);
        self.generator.forward(g, &params, x)
    }
}

/// Returns the population channel unchanged.
pub struct PopPassthrough;

impl GradientModel for PopPassthrough {
    fn input_mode(&self) -> InputMode {
        InputMode::Factors
    }

    fn forward(&self, g: &mut Graph<f64>, x: Var) -> Result<Var> {
        g.select_channel(x, 0)
    }
}

/// First 16 hex digits of the SHA-256 of the serialized checkpoint.
pub fn checkpoint_id(ckpt: &ModelCheckpoint) -> Result<String> {
    let digest = Sha256::digest(checkpoint_bytes(ckpt)?);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Pop,
    Lum,
}

impl Factor {
    pub const BOTH: [Factor; 2] = [Factor::Pop, Factor::Lum];

    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Pop => "pop",
            Factor::Lum => "lum",
        }
    }
}

pub const REDUCTION: &str = "mean over ROI";

#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    pub pop: Vec<f64>,
    pub lum: Vec<f64>,
    /// Diagnostic only; water is a constraint, not a factor.
    pub water: Vec<f64>,
    pub roi: RegionOfInterest,
    pub checkpoint_id: String,
    pub reduction: &'static str,
    /// Mean generated built density over the ROI.
    pub value: f64,
}

impl GradientField {
    pub fn factor(&self, f: Factor) -> &[f64] {
        match f {
            Factor::Pop => &self.pop,
            Factor::Lum => &self.lum,
        }
    }

    pub fn grid(&self, f: Factor) -> Grid {
        Grid::new(self.width, self.height, self.factor(f).iter().map(|&v| v as f32).collect())
            .expect("field planes match their dimensions")
    }
}

fn roi_tensor(roi: &RegionOfInterest) -> Tensor<f64> {
    Tensor::new(
        &[1, 1, roi.mask.height(), roi.mask.width()],
        roi.mask.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask dimensions are consistent")
}

fn check_input(model: &dyn GradientModel, input: &Tensor<f64>, roi: &RegionOfInterest) -> Result<()> {
    if model.input_mode() != InputMode::Factors {
        return Err(Error::Validation(format!(
            "mode mismatch: factor gradients need a factors model, got {}",
            model.input_mode().as_str()
        )));
    }
    let s = input.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 || s[2] != roi.mask.height() || s[3] != roi.mask.width() {
        return Err(Error::Shape(format!(
            "input {s:?} does not match a [1,3,{},{}] factor stack",
            roi.mask.height(),
            roi.mask.width()
        )));
    }
    if roi.is_empty() {
        return Err(Error::Validation("empty region of interest".into()));
    }
    Ok(())
}

fn roi_mean(g: &mut Graph<f64>, model: &dyn GradientModel, x: Var, mask: Var, n: usize) -> Result<Var> {
    let out = model.forward(g, x)?;
    let masked = g.mul(out, mask)?;
    let total = g.sum(masked)?;
    g.scale(total, 1.0 / n as f64)
}

/// ∂(mean generated built density over R)/∂input by one backward pass.
pub fn input_gradient(model: &dyn GradientModel, input: &Tensor<f64>, roi: &RegionOfInterest, checkpoint_id: &str) -> Result<GradientField> {
    check_input(model, input, roi)?;
    let mut g = Graph::<f64>::eval();
    let x = g.leaf(input.clone(), true);
    let mask = g.constant(roi_tensor(roi));
    let y = roi_mean(&mut g, model, x, mask, roi.len())?;
    let value = g.value(y).item();
    let mut grads = g.backward(y)?;
    let grad = grads.take_or_zeros(x, input.shape());
    if !grad.all_finite() {
        return Err(Error::Numeric("non-finite input gradient".into()));
    }
    let plane = roi.mask.len();
    let d = grad.data();
    Ok(GradientField {
        width: roi.mask.width(),
        height: roi.mask.height(),
        pop: d[..plane].to_vec(),
        lum: d[plane..2 * plane].to_vec(),
        water: d[2 * plane..].to_vec(),
        roi: roi.clone(),
        checkpoint_id: checkpoint_id.to_string(),
        reduction: REDUCTION,
        value,
    })
}

/// 64-bit model input for a city.
pub fn city_input(stack: &CityStack) -> Result<Tensor<f64>> {
    Ok(model_inputs(stack, InputMode::Factors)?.input.cast())
}

/// One finite-difference probe of a factor pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PixelCheck {
    pub factor: Factor,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Central differences on random factor pixels, skipping pixels that sit next
/// to an activation kink. Keeps drawing until `samples` pixels are scored.
pub fn gradient_fd_check(
    model: &dyn GradientModel,
    input: &Tensor<f64>,
    roi: &RegionOfInterest,
    samples: usize,
    seed: u64,
) -> Result<Vec<PixelCheck>> {
    check_input(model, input, roi)?;
    let (h, w) = (roi.mask.height(), roi.mask.width());
    let plane = h * w;
    let factors = Tensor::new(&[1, 2, h, w], input.data()[..2 * plane].to_vec())?;
    let water = Tensor::new(&[1, 1, h, w], input.data()[2 * plane..].to_vec())?;
    let mask = roi_tensor(roi);
    let n = roi.len();
    let f = |g: &mut Graph<f64>, vars: &[Var]| {
        let wv = g.constant(water.clone());
        let x = g.concat(&[vars[0], wv])?;
        let m = g.constant(mask.clone());
        roi_mean(g, model, x, m, n)
    };
    let mut out: Vec<PixelCheck> = Vec::new();
    for attempt in 0..32u64 {
        if out.len() >= samples {
            break;
        }
        let opts = FdOptions {
            coords_per_tensor: samples - out.len(),
            seed: seed.wrapping_add(attempt),
            denom_floor: 1e-7,
            ..FdOptions::default()
        };
        let report = finite_diff_check(f, &[("factors".to_string(), factors.clone())], &opts)?;
        for s in report.tensors.iter().flat_map(|t| &t.samples).filter(|s| !s.skipped) {
            let factor = if s.index < plane { Factor::Pop } else { Factor::Lum };
            let (row, col) = ((s.index % plane) / w, s.index % w);
            if out.iter().any(|p| p.factor == factor && p.row == row && p.col == col) {
                continue;
            }
            out.push(PixelCheck { factor, row, col, analytic: s.analytic, numeric: s.numeric, rel_err: s.rel_err });
        }
    }
    out.truncate(samples);
    Ok(out)
}

/// Share of gradient magnitude outside the ROI, Σ_out|g| / Σ|g|.
///
/// A field that is zero everywhere has no spillover.
pub fn spillover(values: &[f64], roi: &RegionOfInterest) -> Result<f64> {
    if values.len() != roi.mask.len() {
        return Err(Error::Shape(format!("field has {} pixels, ROI {}", values.len(), roi.mask.len())));
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    for (v, m) in values.iter().zip(roi.mask.data()) {
        if *m > 0.5 {
            inside += v.abs();
        } else {
            outside += v.abs();
        }
    }
    let total = inside + outside;
    if total == 0.0 {
        log::warn!("spillover of an all-zero gradient field taken as 0");
        return Ok(0.0);
    }
    Ok(outside / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spillover {
    pub pop: f64,
    pub lum: f64,
}

pub fn spillover_fraction(field: &GradientField) -> Spillover {
    let f = |v: &[f64]| spillover(v, &field.roi).expect("field and ROI share a shape");
    Spillover { pop: f(&field.pop), lum: f(&field.lum) }
}

pub const GRADIENT_MAGIC: &[u8; 4] = b"CGRD";
pub const GRADIENT_LAYERS: [&str; 3] = ["g_pop", "g_lum", "roi"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientTileHeader {
    pub version: u32,
    pub city_id: String,
    pub width: usize,
    pub height: usize,
    pub km_per_px: f64,
    pub layers: Vec<String>,
    pub roi_mode: RegionMode,
    pub checkpoint_id: String,
    pub reduction: String,
    pub value: f64,
}

/// Gradient planes stored as f32 in the tile container.
pub fn save_gradient_tile(field: &GradientField, city_id: &str, km_per_px: f64, path: impl AsRef<Path>) -> Result<()> {
    let header = GradientTileHeader {
        version: FORMAT_VERSION,
        city_id: city_id.to_string(),
        width: field.width,
        height: field.height,
        km_per_px,
        layers: GRADIENT_LAYERS.iter().map(|s| s.to_string()).collect(),
        roi_mode: field.roi.mode,
        checkpoint_id: field.checkpoint_id.clone(),
        reduction: field.reduction.to_string(),
        value: field.value,
    };
    let pop = field.grid(Factor::Pop);
    let lum = field.grid(Factor::Lum);
    let bytes = container::encode(GRADIENT_MAGIC, &header, &[pop.data(), lum.data(), field.roi.mask.data()])?;
    container::write_file(path.as_ref(), &bytes)
}

/// Header plus the `g_pop`, `g_lum` and `roi` planes.
pub fn load_gradient_tile(path: impl AsRef<Path>) -> Result<(GradientTileHeader, [Grid; 3])> {
    let bytes = container::read_file(path.as_ref())?;
    let (header, payload): (GradientTileHeader, _) = container::decode(GRADIENT_MAGIC, &bytes)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported gradient tile version {}", header.version)));
    }
    if header.layers != GRADIENT_LAYERS {
        return Err(Error::Format(format!("unexpected gradient layers {:?}", header.layers)));
    }
    let plane = header.width * header.height;
    let values = container::read_f32s(payload, 3 * plane)?;
    let grid = |k: usize| Grid::new(header.width, header.height, values[k * plane..(k + 1) * plane].to_vec());
    let planes = [grid(0)?, grid(1)?, grid(2)?];
    Ok((header, planes))
}

/// ROI derived from the city's observed built layer.
pub fn city_region(stack: &CityStack, mode: RegionMode, threshold: f32, connectivity: Connectivity) -> Result<RegionOfInterest> {
    region_select(stack.require(LayerId::Bld)?, mode, threshold, connectivity)
}
