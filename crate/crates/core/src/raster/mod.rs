//! City tile data model: aligned raster layers plus geo-resolution metadata.

mod png;
mod tile;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::png::{export_heatmap_png, export_png, ChannelMap};
pub use self::tile::{load_tile, save_tile, tile_bytes, TileHeader, TileLayerEntry, TILE_MAGIC};

/// Raw luminosity upper bound (sensor scale 0..180).
pub const LUM_MAX: f32 = 180.0;
/// Default population cap used by log normalization, persons per pixel.
pub const DEFAULT_POP_MAX_CAP: f64 = 50_000.0;
/// Default training resolution.
pub const DEFAULT_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerId {
    Pop,
    Lum,
    Bld,
    Water,
    Boundary,
}

impl LayerId {
    pub const ALL: [LayerId; 5] =
        [LayerId::Pop, LayerId::Lum, LayerId::Bld, LayerId::Water, LayerId::Boundary];

    pub fn is_binary(self) -> bool {
        matches!(self, LayerId::Water | LayerId::Boundary)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerId::Pop => "pop",
            LayerId::Lum => "lum",
            LayerId::Bld => "bld",
            LayerId::Water => "water",
            LayerId::Boundary => "boundary",
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerId::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown layer id {s:?}")))
    }
}

/// Row-major 2-D grid of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Grid { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Grid { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Parameters of the log scaling applied by [`normalize_layers`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scheme: NormalizationScheme,
    pub pop_max_cap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationScheme {
    Log1p,
}

/// Aligned multi-layer city raster.
///
/// Layers are kept in canonical [`LayerId`] order; `normalized` carries one
/// flag per present layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CityStack {
    city_id: String,
    width: usize,
    height: usize,
    km_per_px: f64,
    layers: BTreeMap<LayerId, Grid>,
    normalized: BTreeMap<LayerId, bool>,
    normalization: Option<Normalization>,
}

impl CityStack {
    /// Build a raw (unnormalized) stack and validate every invariant.
    pub fn new(
        city_id: impl Into<String>,
        km_per_px: f64,
        layers: BTreeMap<LayerId, Grid>,
    ) -> Result<Self> {
        let normalized = layers.keys().map(|&k| (k, false)).collect();
        Self::from_parts(city_id.into(), km_per_px, layers, normalized, None)
    }

    pub(crate) fn from_parts(
        city_id: String,
        km_per_px: f64,
        layers: BTreeMap<LayerId, Grid>,
        normalized: BTreeMap<LayerId, bool>,
        normalization: Option<Normalization>,
    ) -> Result<Self> {
        let first = layers
            .values()
            .next()
            .ok_or_else(|| Error::Validation("stack has no layers".into()))?;
        let (width, height) = (first.width, first.height);
        let stack = CityStack { city_id, width, height, km_per_px, layers, normalized, normalization };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("stack has no layers".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("stack has zero extent".into()));
        }
        if !(self.km_per_px.is_finite() && self.km_per_px > 0.0) {
            return Err(Error::Validation(format!("km_per_px must be finite and > 0, got {}", self.km_per_px)));
        }
        for (&id, grid) in &self.layers {
            if grid.width != self.width || grid.height != self.height {
                return Err(Error::Validation(format!(
                    "layer {id} is {}x{}, stack is {}x{}",
                    grid.width, grid.height, self.width, self.height
                )));
            }
            if let Some(v) = grid.data.iter().find(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("layer {id} has non-finite value {v}")));
            }
            let normalized = self.is_normalized(id);
            let (lo, hi) = match id {
                LayerId::Water | LayerId::Boundary => {
                    if !grid.is_binary() {
                        return Err(Error::Validation(format!("layer {id} must be binary (0/1)")));
                    }
                    continue;
                }
                LayerId::Bld => (0.0, 1.0),
                LayerId::Pop if normalized => (0.0, 1.0),
                LayerId::Pop => (0.0, f32::INFINITY),
                LayerId::Lum if normalized => (0.0, 1.0),
                LayerId::Lum => (0.0, LUM_MAX),
            };
            if let Some(v) = grid.data.iter().find(|&&v| v < lo || v > hi) {
                return Err(Error::Validation(format!("layer {id} value {v} outside [{lo}, {hi}]")));
            }
        }
        if self.normalized.keys().ne(self.layers.keys()) {
            return Err(Error::Validation("normalized flags must cover exactly the present layers".into()));
        }
        Ok(())
    }

    pub fn city_id(&self) -> &str {
        &self.city_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn km_per_px(&self) -> f64 {
        self.km_per_px
    }

    /// Physical window width in km.
    pub fn window_km(&self) -> f64 {
        self.width as f64 * self.km_per_px
    }

    pub fn layer(&self, id: LayerId) -> Option<&Grid> {
        self.layers.get(&id)
    }

    /// Like [`CityStack::layer`] but reports a missing layer as a validation error.
    pub fn require(&self, id: LayerId) -> Result<&Grid> {
        self.layer(id)
            .ok_or_else(|| Error::Validation(format!("city {} has no {id} layer", self.city_id)))
    }

    pub fn layers(&self) -> impl Iterator<Item = (LayerId, &Grid)> {
        self.layers.iter().map(|(&k, v)| (k, v))
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        self.layers.keys().copied().collect()
    }

    pub fn is_normalized(&self, id: LayerId) -> bool {
        self.normalized.get(&id).copied().unwrap_or(false)
    }

    pub fn normalized_flags(&self) -> &BTreeMap<LayerId, bool> {
        &self.normalized
    }

    pub fn normalization(&self) -> Option<Normalization> {
        self.normalization
    }

    /// Copy of this stack with `id` replaced or added. The new layer inherits
    /// the stack's normalization state for factor layers.
    pub fn with_layer(&self, id: LayerId, grid: Grid, normalized: bool) -> Result<CityStack> {
        let mut layers = self.layers.clone();
        let mut flags = self.normalized.clone();
        layers.insert(id, grid);
        flags.insert(id, normalized);
        Self::from_parts(self.city_id.clone(), self.km_per_px, layers, flags, self.normalization)
    }

    pub fn with_city_id(&self, city_id: impl Into<String>) -> CityStack {
        CityStack { city_id: city_id.into(), ..self.clone() }
    }
}

/// Log-scale population and luminosity into [0, 1].
///
/// `pop' = ln(1+pop)/ln(1+cap)` and `lum' = ln(1+lum)/ln(1+180)`, both clipped.
/// Built density and masks pass through untouched. A stack whose factor
/// layers are already normalized is rejected instead of being re-scaled.
pub fn normalize_layers(stack: &CityStack, pop_max_cap: f64) -> Result<CityStack> {
    if !(pop_max_cap.is_finite() && pop_max_cap > 0.0) {
        return Err(Error::Config(format!("pop_max_cap must be > 0, got {pop_max_cap}")));
    }
    if [LayerId::Pop, LayerId::Lum].iter().any(|&id| stack.is_normalized(id)) {
        return Err(Error::State(format!("city {} is already normalized", stack.city_id)));
    }
    let mut layers = stack.layers.clone();
    let mut flags = stack.normalized.clone();
    let pop_den = pop_max_cap.ln_1p();
    let lum_den = (LUM_MAX as f64).ln_1p();
    for (id, den) in [(LayerId::Pop, pop_den), (LayerId::Lum, lum_den)] {
        if let Some(grid) = layers.get_mut(&id) {
            for v in grid.data.iter_mut() {
                *v = ((*v as f64).ln_1p() / den).clamp(0.0, 1.0) as f32;
            }
            flags.insert(id, true);
        }
    }
    CityStack::from_parts(
        stack.city_id.clone(),
        stack.km_per_px,
        layers,
        flags,
        Some(Normalization { scheme: NormalizationScheme::Log1p, pop_max_cap }),
    )
}

/// `layer ⊙ (1 − water)`: zero wherever water is present.
pub fn apply_water_mask(layer: &Grid, water: &Grid) -> Result<Grid> {
    if !layer.same_shape(water) {
        return Err(Error::Shape(format!(
            "layer {}x{} vs water {}x{}",
            layer.width, layer.height, water.width, water.height
        )));
    }
    let data = layer
        .data
        .iter()
        .zip(&water.data)
        .map(|(&v, &w)| if w > 0.0 { 0.0 } else { v })
        .collect();
    Ok(Grid { width: layer.width, height: layer.height, data })
}

/// Resample a square stack to `size × size`.
///
/// Continuous layers use area-weighted averaging, binary layers use max
/// pooling over every source pixel the target pixel overlaps. `km_per_px`
/// is rescaled so the physical window width is preserved.
pub fn resample(stack: &CityStack, size: usize, allow_upsample: bool) -> Result<CityStack> {
    if size < 8 {
        return Err(Error::Config(format!("resample size must be >= 8, got {size}")));
    }
    if stack.width != stack.height {
        return Err(Error::Validation(format!(
            "resample expects a square stack, got {}x{}",
            stack.width, stack.height
        )));
    }
    if size == stack.width {
        return Ok(stack.clone());
    }
    if size > stack.width && !allow_upsample {
        return Err(Error::Config(format!("upsampling {} -> {size} is disabled", stack.width)));
    }
    let weights = overlap_weights(stack.width, size);
    let mut layers = BTreeMap::new();
    for (&id, grid) in &stack.layers {
        let out = if id.is_binary() {
            resample_max(grid, &weights, size)
        } else {
            resample_area(grid, &weights, size)
        };
        layers.insert(id, out);
    }
    let km_per_px = stack.km_per_px * stack.width as f64 / size as f64;
    CityStack::from_parts(stack.city_id.clone(), km_per_px, layers, stack.normalized.clone(), stack.normalization)
}

/// For each target cell along one axis: (source index, overlap fraction of
/// the target cell). Fractions of one target cell sum to 1.
fn overlap_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let lo = t as f64 * scale;
            let hi = (t + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)) / scale;
                    (overlap > 1e-12).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

fn resample_area(grid: &Grid, w: &[Vec<(usize, f64)>], size: usize) -> Grid {
    Grid::from_fn(size, size, |r, c| {
        let mut acc = 0.0f64;
        for &(sr, wr) in &w[r] {
            for &(sc, wc) in &w[c] {
                acc += wr * wc * grid.get(sr, sc) as f64;
            }
        }
        acc as f32
    })
}

fn resample_max(grid: &Grid, w: &[Vec<(usize, f64)>], size: usize) -> Grid {
    Grid::from_fn(size, size, |r, c| {
        let any = w[r].iter().any(|&(sr, _)| w[c].iter().any(|&(sc, _)| grid.get(sr, sc) > 0.0));
        if any {
            1.0
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack_with(layers: &[(LayerId, Grid)]) -> Result<CityStack> {
        CityStack::new("t", 1.5, layers.iter().cloned().collect())
    }

    #[test]
    fn binary_and_range_invariants() {
        let half = Grid::filled(4, 4, 0.5);
        assert!(matches!(stack_with(&[(LayerId::Water, half.clone())]), Err(Error::Validation(_))));
        assert!(stack_with(&[(LayerId::Bld, half)]).is_ok());
        assert!(stack_with(&[(LayerId::Lum, Grid::filled(4, 4, 181.0))]).is_err());
        assert!(stack_with(&[(LayerId::Pop, Grid::filled(4, 4, -1.0))]).is_err());
        assert!(stack_with(&[(LayerId::Bld, Grid::filled(4, 4, 0.0)), (LayerId::Pop, Grid::filled(3, 4, 0.0))]).is_err());
        assert!(matches!(stack_with(&[]), Err(Error::Validation(_))));
        let bad_km = CityStack::new("t", 0.0, [(LayerId::Bld, Grid::filled(2, 2, 0.0))].into());
        assert!(bad_km.is_err());
    }

    #[test]
    fn normalization_values() {
        let pop = Grid::new(3, 1, vec![0.0, 5_000.0, 1e9]).unwrap();
        let lum = Grid::new(3, 1, vec![0.0, 180.0, 90.0]).unwrap();
        let s = stack_with(&[(LayerId::Pop, pop), (LayerId::Lum, lum)]).unwrap();
        let n = normalize_layers(&s, 10_000.0).unwrap();
        let pop = n.layer(LayerId::Pop).unwrap();
        let lum = n.layer(LayerId::Lum).unwrap();
        assert_eq!(lum.get(0, 0), 0.0);
        assert_eq!(lum.get(0, 1), 1.0);
        assert_eq!(pop.get(0, 0), 0.0);
        // ln(5001)/ln(10001), evaluated independently in f64: 0.92475417
        assert!((pop.get(0, 1) as f64 - 0.924_754_17).abs() < 1e-6, "{}", pop.get(0, 1));
        assert_eq!(pop.get(0, 2), 1.0);
        assert!(n.is_normalized(LayerId::Pop) && n.is_normalized(LayerId::Lum));
        assert!(matches!(normalize_layers(&n, 10_000.0), Err(Error::State(_))));
    }

    #[test]
    fn water_mask_cases() {
        let layer = Grid::from_fn(3, 3, |r, c| (r * 3 + c) as f32 / 9.0);
        let none = Grid::filled(3, 3, 0.0);
        assert_eq!(apply_water_mask(&layer, &none).unwrap(), layer);
        let all = Grid::filled(3, 3, 1.0);
        assert!(apply_water_mask(&layer, &all).unwrap().data().iter().all(|&v| v == 0.0));
        let mut one = none.clone();
        one.set(1, 2, 1.0);
        let out = apply_water_mask(&layer, &one).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if (r, c) == (1, 2) { 0.0 } else { layer.get(r, c) };
                assert_eq!(out.get(r, c), expect);
            }
        }
        assert!(matches!(apply_water_mask(&layer, &Grid::filled(2, 3, 0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn resample_cases() {
        let s = stack_with(&[(LayerId::Bld, Grid::filled(128, 128, 0.3))]).unwrap();
        assert_eq!(resample(&s, 128, false).unwrap(), s);
        let down = resample(&s, 48, false).unwrap();
        assert!(down.layer(LayerId::Bld).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert_eq!(down.window_km(), s.window_km());
        assert!(matches!(resample(&s, 256, false), Err(Error::Config(_))));

        // 4x4 water with a single 1 at (1,2) lands in the top-right quadrant.
        let mut water = Grid::filled(8, 8, 0.0);
        water.set(1, 5, 1.0);
        let s = stack_with(&[(LayerId::Water, water)]).unwrap();
        let w = resample(&s, 8, false).unwrap();
        assert_eq!(w, s);
        let mut water4 = Grid::filled(16, 16, 0.0);
        water4.set(3, 12, 1.0);
        let s = stack_with(&[(LayerId::Water, water4)]).unwrap();
        let w = resample(&s, 8, false).unwrap();
        let g = w.layer(LayerId::Water).unwrap();
        assert_eq!(g.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(g.get(1, 6), 1.0);
    }

    #[test]
    fn area_average_of_known_blocks() {
        let g = Grid::from_fn(16, 16, |r, c| if r < 8 && c < 8 { 1.0 } else { 0.0 });
        let s = stack_with(&[(LayerId::Bld, g)]).unwrap();
        let r = resample(&s, 8, false).unwrap();
        let g = r.layer(LayerId::Bld).unwrap();
        assert_eq!(g.get(0, 0), 1.0);
        assert_eq!(g.get(3, 3), 1.0);
        assert_eq!(g.get(4, 4), 0.0);
        // 16 -> 9: target cell 4 spans source [7.11, 8.89], half of it inside the block.
        let r = resample(&s, 9, false).unwrap();
        let g = r.layer(LayerId::Bld).unwrap();
        assert!((g.get(0, 4) - 0.5).abs() < 1e-6);
        assert!((g.get(4, 4) - 0.25).abs() < 1e-6);
    }
}
