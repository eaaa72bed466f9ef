//! Urban-form statistics for real and generated built maps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Grid;

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_TOP_K: usize = 20;

pub fn built_area_fraction(map: &Grid) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::Validation("built-area fraction of an empty map".into()));
    }
    Ok(map.data().iter().map(|&v| v as f64).sum::<f64>() / map.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl std::str::FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4" => Ok(Connectivity::Four),
            "8" => Ok(Connectivity::Eight),
            other => Err(Error::Validation(format!("connectivity must be 4 or 8, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchLabeling {
    width: usize,
    height: usize,
    /// 0 = background, patches numbered 1..=K in row-major order of first pixel.
    labels: Vec<u32>,
    /// Pixel count of patch `k` at index `k-1`.
    label_sizes: Vec<usize>,
    /// Patch sizes, largest first.
    pub sizes: Vec<usize>,
    pub connectivity: Connectivity,
}

impl PatchLabeling {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn num_patches(&self) -> usize {
        self.label_sizes.len()
    }

    pub fn size_of(&self, label: u32) -> Option<usize> {
        label.checked_sub(1).and_then(|k| self.label_sizes.get(k as usize)).copied()
    }

    pub fn largest(&self) -> usize {
        self.sizes.first().copied().unwrap_or(0)
    }

    /// Binary mask of one patch.
    pub fn mask(&self, label: u32) -> Grid {
        let data = self.labels.iter().map(|&l| if l == label { 1.0 } else { 0.0 }).collect();
        Grid::new(self.width, self.height, data).expect("label grid is well formed")
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // Keep the smaller index as root so roots are first-seen pixels.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Connected components of `{map > threshold}`.
pub fn label_patches(map: &Grid, threshold: f32, connectivity: Connectivity) -> PatchLabeling {
    let (w, h) = (map.width(), map.height());
    let fg: Vec<bool> = map.data().iter().map(|&v| v > threshold).collect();
    let mut parent: Vec<usize> = (0..w * h).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !fg[i] {
                continue;
            }
            if c > 0 && fg[i - 1] {
                union(&mut parent, i, i - 1);
            }
            if r > 0 {
                if fg[i - w] {
                    union(&mut parent, i, i - w);
                }
                if connectivity == Connectivity::Eight {
                    if c > 0 && fg[i - w - 1] {
                        union(&mut parent, i, i - w - 1);
                    }
                    if c + 1 < w && fg[i - w + 1] {
                        union(&mut parent, i, i - w + 1);
                    }
                }
            }
        }
    }

    let mut labels = vec![0u32; w * h];
    let mut root_label: BTreeMap<usize, u32> = BTreeMap::new();
    let mut label_sizes = Vec::new();
    for i in 0..w * h {
        if !fg[i] {
            continue;
        }
        let root = find(&mut parent, i);
        let next = root_label.len() as u32 + 1;
        let l = *root_label.entry(root).or_insert_with(|| {
            label_sizes.push(0);
            next
        });
        labels[i] = l;
        label_sizes[l as usize - 1] += 1;
    }
    let mut sizes = label_sizes.clone();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    PatchLabeling { width: w, height: h, labels, label_sizes, sizes, connectivity }
}

/// Count of patches with size in `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDistribution {
    pub bins: Vec<SizeBin>,
    /// Masks of the largest patches, largest first; ties go to the lower label.
    pub top: Vec<Grid>,
}

/// Base-2 size histogram plus masks of the `top_k` largest patches.
pub fn patch_size_distribution(labeling: &PatchLabeling, top_k: usize) -> PatchDistribution {
    let mut bins: Vec<SizeBin> = Vec::new();
    for &s in &labeling.label_sizes {
        let j = usize::BITS - 1 - s.leading_zeros();
        while bins.len() <= j as usize {
            let k = bins.len();
            bins.push(SizeBin { lo: 1 << k, hi: 1 << (k + 1), count: 0 });
        }
        bins[j as usize].count += 1;
    }
    let mut order: Vec<u32> = (1..=labeling.num_patches() as u32).collect();
    order.sort_by_key(|&l| (std::cmp::Reverse(labeling.label_sizes[l as usize - 1]), l));
    let top = order.iter().take(top_k).map(|&l| labeling.mask(l)).collect();
    PatchDistribution { bins, top }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FractalStatus {
    Ok,
    /// Slope fell outside `[0,2]` and was clamped.
    Clamped,
    /// Too few occupied scales; `f` reported as 0.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxScale {
    pub box_size: usize,
    pub count: usize,
    /// `ln(1/s)` with `s` the box side as a fraction of the padded map side.
    pub log_inv_size: f64,
    pub log_count: f64,
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FractalResult {
    pub f: f64,
    pub status: FractalStatus,
    pub scales: Vec<BoxScale>,
}

/// Box-counting dimension of `{map > threshold}`.
///
/// Non-square or non-power-of-two maps are zero-padded (top-left anchored) up
/// to the next power-of-two square. Boxes of side `side/2, side/4, …, 2` are
/// counted when they hold at least `min_pixels` foreground pixels. Boxes tile
/// the padded square periodically and each scale keeps the smallest count over
/// all lattice offsets, so the estimate does not depend on where the pattern
/// sits relative to the lattice. The two
/// coarsest scales are dropped from the fit when they hold fewer than four
/// boxes.
pub fn fractal_dimension(map: &Grid, threshold: f32, min_pixels: usize) -> Result<FractalResult> {
    if min_pixels == 0 {
        return Err(Error::Validation("box occupancy threshold must be >= 1 pixel".into()));
    }
    let side = map.width().max(map.height()).next_power_of_two();
    if side < 8 {
        return Err(Error::Validation(format!("map too small for box counting: {}x{}", map.width(), map.height())));
    }
    // Prefix sums of the foreground indicator over the padded square.
    let mut sat = vec![0u32; (side + 1) * (side + 1)];
    for r in 0..side {
        for c in 0..side {
            let v = (r < map.height() && c < map.width() && map.get(r, c) > threshold) as u32;
            sat[(r + 1) * (side + 1) + c + 1] =
                v + sat[r * (side + 1) + c + 1] + sat[(r + 1) * (side + 1) + c] - sat[r * (side + 1) + c];
        }
    }
    let at = |r: usize, c: usize| sat[r * (side + 1) + c];
    let plain = |r0: usize, r1: usize, c0: usize, c1: usize| at(r1, c1) + at(r0, c0) - at(r0, c1) - at(r1, c0);
    // Interval [o, o+s) on the periodic axis as at most two plain intervals.
    let split = |o: usize, s: usize| -> [(usize, usize); 2] {
        if o + s <= side {
            [(o, o + s), (0, 0)]
        } else {
            [(o, side), (0, o + s - side)]
        }
    };
    let count_at = |s: usize, or: usize, oc: usize| {
        let mut count = 0;
        for i in 0..side / s {
            for j in 0..side / s {
                let mut sum = 0;
                for (r0, r1) in split(i * s + or, s) {
                    for (c0, c1) in split(j * s + oc, s) {
                        sum += plain(r0, r1, c0, c1);
                    }
                }
                if sum as usize >= min_pixels {
                    count += 1;
                }
            }
        }
        count
    };

    let mut scales = Vec::new();
    let mut s = side / 2;
    let mut level = 0;
    while s >= 2 {
        let mut count = usize::MAX;
        for or in 0..s {
            for oc in 0..s {
                count = count.min(count_at(s, or, oc));
            }
        }
        let coarse = level < 2;
        scales.push(BoxScale {
            box_size: s,
            count,
            log_inv_size: ((side / s) as f64).ln(),
            log_count: if count > 0 { (count as f64).ln() } else { f64::NEG_INFINITY },
            used: count > 0 && !(coarse && count < 4),
        });
        s /= 2;
        level += 1;
    }

    let pts: Vec<(f64, f64)> = scales.iter().filter(|s| s.used).map(|s| (s.log_inv_size, s.log_count)).collect();
    if pts.len() < 3 {
        return Err(Error::Validation(format!("only {} usable box scales, need 3", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let (f, status) = if (0.0..=2.0).contains(&slope) {
        (slope, FractalStatus::Ok)
    } else {
        (slope.clamp(0.0, 2.0), FractalStatus::Clamped)
    };
    Ok(FractalResult { f, status, scales })
}

/// Squared Pearson correlation.
pub fn pearson_r2(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!("pearson_r2 lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Validation(format!("pearson_r2 needs at least 3 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Validation("R² undefined: zero variance".into()));
    }
    Ok((sxy * sxy / (sxx * syy)).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Generated,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Generated => "generated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsOptions {
    pub threshold: f32,
    pub connectivity: Connectivity,
    pub min_box_pixels: usize,
    pub top_k: usize,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            threshold: DEFAULT_THRESHOLD,
            connectivity: Connectivity::Eight,
            min_box_pixels: 1,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRecord {
    pub city_id: String,
    pub source: Source,
    pub a: f64,
    pub f: f64,
    pub f_status: FractalStatus,
    pub n_patches: usize,
    pub largest_patch_px: usize,
    pub histogram: Vec<SizeBin>,
    /// Side of the analysed window.
    pub window_km: f64,
}

pub fn city_stats(map: &Grid, city_id: &str, source: Source, window_km: f64, opts: &StatsOptions) -> Result<StatsRecord> {
    let a = built_area_fraction(map)?;
    let labeling = label_patches(map, opts.threshold, opts.connectivity);
    let dist = patch_size_distribution(&labeling, 0);
    let (f, f_status) = match fractal_dimension(map, opts.threshold, opts.min_box_pixels) {
        Ok(r) => (r.f, r.status),
        Err(Error::Validation(_)) => (0.0, FractalStatus::Degenerate),
        Err(e) => return Err(e),
    };
    Ok(StatsRecord {
        city_id: city_id.to_string(),
        source,
        a,
        f,
        f_status,
        n_patches: labeling.num_patches(),
        largest_patch_px: labeling.largest(),
        histogram: dist.bins,
        window_km,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    pub city_id: String,
    pub a_real: f64,
    pub a_generated: f64,
    pub f_real: f64,
    pub f_generated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    /// `None` when one side has zero variance.
    pub r2_a: Option<f64>,
    pub r2_f: Option<f64>,
    pub pairs: Vec<ScatterRow>,
    /// City ids present on only one side.
    pub dropped: Vec<String>,
}

/// Pair records by city id and correlate the statistics.
pub fn compare_stats(real: &[StatsRecord], generated: &[StatsRecord]) -> Result<CompareReport> {
    let gen: BTreeMap<&str, &StatsRecord> = generated.iter().map(|r| (r.city_id.as_str(), r)).collect();
    let real_ids: BTreeMap<&str, &StatsRecord> = real.iter().map(|r| (r.city_id.as_str(), r)).collect();
    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    for (id, r) in &real_ids {
        match gen.get(id) {
            Some(g) => pairs.push(ScatterRow {
                city_id: id.to_string(),
                a_real: r.a,
                a_generated: g.a,
                f_real: r.f,
                f_generated: g.f,
            }),
            None => dropped.push(id.to_string()),
        }
    }
    dropped.extend(gen.keys().filter(|id| !real_ids.contains_key(*id)).map(|id| id.to_string()));
    if !dropped.is_empty() {
        log::warn!("{} cities without a counterpart dropped from the comparison", dropped.len());
    }
    if pairs.len() < 3 {
        return Err(Error::Validation(format!("need at least 3 paired cities, got {}", pairs.len())));
    }
    let col = |f: fn(&ScatterRow) -> f64| pairs.iter().map(f).collect::<Vec<_>>();
    let r2 = |x: Vec<f64>, y: Vec<f64>, what: &str| match pearson_r2(&x, &y) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Validation(msg)) => {
            log::warn!("R² of {what}: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    };
    let r2_a = r2(col(|p| p.a_real), col(|p| p.a_generated), "built-area fraction")?;
    let r2_f = r2(col(|p| p.f_real), col(|p| p.f_generated), "fractal dimension")?;
    Ok(CompareReport { r2_a, r2_f, pairs, dropped })
}

pub const STATS_CSV_HEADER: &str = "city_id,source,a,f,n_patches,largest_patch_px";

pub fn write_stats_csv(path: &Path, records: &[StatsRecord]) -> Result<()> {
    let mut out = format!("{STATS_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.city_id,
            r.source.as_str(),
            r.a,
            r.f,
            r.n_patches,
            r.largest_patch_px
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `{city_id: {source: [bins]}}` as pretty JSON.
pub fn write_histograms_json(path: &Path, records: &[StatsRecord]) -> Result<()> {
    let mut doc: BTreeMap<&str, BTreeMap<&str, &[SizeBin]>> = BTreeMap::new();
    for r in records {
        doc.entry(&r.city_id).or_default().insert(r.source.as_str(), &r.histogram);
    }
    let json = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_scatter_csv(path: &Path, report: &CompareReport) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("city_id,a_real,a_generated,f_real,f_generated\n");
    for p in &report.pairs {
        out.push_str(&format!("{},{},{},{},{}\n", p.city_id, p.a_real, p.a_generated, p.f_real, p.f_generated));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
