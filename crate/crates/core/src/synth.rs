//! Procedural synthetic cities standing in for a real remote-sensing corpus.
//!
//! Built land grows by nucleation and accretion: candidate pixels are drawn
//! next to (or, rarely, an exponential jump away from) existing built pixels
//! and accepted with probability `exp(-(d-1)/τ)`, where `d` is the distance
//! to the nearest built pixel.
//! Population grows with the square of a blurred copy of the built mask,
//! luminosity is a saturating function of the same activity level. Neither factor is water-masked, so
//! the factor layers bleed across shorelines while built land never does.
//!
//! Every random draw comes from a `ChaCha8Rng` seeded with
//! `SynthParams::seed`; ChaCha is a counter-based stream cipher whose output
//! is defined independently of the platform, so tiles are reproducible
//! bit-for-bit wherever the float math is IEEE-conformant.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{save_tile, CityStack, Grid, LayerId, LUM_MAX};

/// Physical width of every synthetic window.
pub const WINDOW_KM: f64 = 100.0;
/// Peak population density of a fully built neighbourhood, persons / px.
const POP_PEAK: f64 = 20_000.0;
pub const MANIFEST_NAME: &str = "manifest.jsonl";
const JUMP_PROB: f64 = 0.12;
/// Drive at which luminosity reaches 63% of saturation.
const LUM_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaterMode {
    None,
    River,
    Coast,
    Blobs,
    /// River, coast or blobs, drawn per city from its seed.
    Mixed,
}

impl std::str::FromStr for WaterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(WaterMode::None),
            "river" => Ok(WaterMode::River),
            "coast" => Ok(WaterMode::Coast),
            "blobs" => Ok(WaterMode::Blobs),
            "mixed" => Ok(WaterMode::Mixed),
            other => Err(Error::Validation(format!("unknown water mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub size: usize,
    pub n_seeds: usize,
    pub growth_steps: usize,
    pub water_mode: WaterMode,
    pub noise_scale: f64,
    pub pop_coupling: f64,
    pub lum_coupling: f64,
    /// Attachment decay length in pixels.
    pub tau: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 0,
            size: 64,
            n_seeds: 6,
            growth_steps: 500,
            water_mode: WaterMode::Mixed,
            noise_scale: 0.05,
            pop_coupling: 0.8,
            lum_coupling: 0.8,
            tau: 4.0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Validation(format!("synthetic city size must be >= 16, got {}", self.size)));
        }
        if self.n_seeds == 0 && self.growth_steps > 0 {
            return Err(Error::Validation("growth needs at least one seed".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Validation("noise_scale must be finite and >= 0".into()));
        }
        for (name, v) in [("pop_coupling", self.pop_coupling), ("lum_coupling", self.lum_coupling)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Validation("tau must be > 0".into()));
        }
        Ok(())
    }

    /// Per-city variation used by [`generate_dataset`]: seed count and growth
    /// budget are redrawn around the base values from the city's own seed.
    pub fn jittered(&self, seed: u64) -> SynthParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
        let lo = (self.n_seeds / 2).max(1);
        let hi = (self.n_seeds * 2).max(lo);
        let n_seeds = if self.n_seeds == 0 { 0 } else { rng.gen_range(lo..=hi) };
        let growth_steps = (self.growth_steps as f64 * rng.gen_range(0.3..1.7)).round() as usize;
        SynthParams { seed, n_seeds, growth_steps, ..*self }
    }
}

pub fn city_id_for_seed(seed: u64) -> String {
    format!("synth-{seed:06}")
}

pub fn generate_city(params: &SynthParams) -> Result<CityStack> {
    params.validate()?;
    let n = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let water = water_mask(params.water_mode, n, &mut rng);
    let built = grow_built(params, &water, &mut rng)?;

    let bld = Grid::from_fn(n, n, |r, c| if built[r * n + c] { 1.0 } else { 0.0 });
    let blurred = normalize_max(&gaussian_blur(&bld, 2.0));
    let field_pop = smooth_noise(n, &mut rng);
    let field_lum = smooth_noise(n, &mut rng);

    let mut pop = Grid::filled(n, n, 0.0);
    let mut lum = Grid::filled(n, n, 0.0);
    for i in 0..n * n {
        let white = params.noise_scale * rng.gen::<f64>();
        let rel = params.pop_coupling * blurred.data()[i] as f64
            + (1.0 - params.pop_coupling) * 0.3 * field_pop.data()[i] as f64
            + white;
        let rel = rel.max(0.0);
        pop.data_mut()[i] = (POP_PEAK * rel * rel) as f32;

        let white = params.noise_scale * rng.gen::<f64>();
        let drive = params.lum_coupling * rel * rel
            + (1.0 - params.lum_coupling) * 0.1 * field_lum.data()[i] as f64
            + 0.2 * white;
        let l = LUM_MAX as f64 * (1.0 - (-drive / LUM_SCALE).exp());
        lum.data_mut()[i] = (l.clamp(0.0, LUM_MAX as f64)) as f32;
    }

    let centre = (n as f64 - 1.0) / 2.0;
    let radius = 0.35 * n as f64;
    let boundary = Grid::from_fn(n, n, |r, c| {
        let d = ((r as f64 - centre).powi(2) + (c as f64 - centre).powi(2)).sqrt();
        if d <= radius {
            1.0
        } else {
            0.0
        }
    });

    let layers: BTreeMap<LayerId, Grid> = [
        (LayerId::Pop, pop),
        (LayerId::Lum, lum),
        (LayerId::Bld, bld),
        (LayerId::Water, water),
        (LayerId::Boundary, boundary),
    ]
    .into_iter()
    .collect();
    CityStack::new(city_id_for_seed(params.seed), WINDOW_KM / n as f64, layers)
}

fn water_mask(mode: WaterMode, n: usize, rng: &mut ChaCha8Rng) -> Grid {
    let mode = match mode {
        WaterMode::Mixed => [WaterMode::River, WaterMode::Coast, WaterMode::Blobs][rng.gen_range(0..3)],
        m => m,
    };
    let nf = n as f64;
    let centre = (nf - 1.0) / 2.0;
    match mode {
        WaterMode::None => Grid::filled(n, n, 0.0),
        WaterMode::River => {
            let vertical = rng.gen_bool(0.5);
            let offset = centre + nf * rng.gen_range(-0.25..0.25);
            let amp = nf * rng.gen_range(0.03..0.12);
            let wavelength = nf * rng.gen_range(0.5..1.2);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let half_width = nf * rng.gen_range(0.02..0.045);
            Grid::from_fn(n, n, |r, c| {
                let (along, across) = if vertical { (r as f64, c as f64) } else { (c as f64, r as f64) };
                let centre_line = offset + amp * (2.0 * PI * along / wavelength + phase).sin();
                if (across - centre_line).abs() <= half_width {
                    1.0
                } else {
                    0.0
                }
            })
        }
        WaterMode::Coast => {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let (nx, ny) = (angle.cos(), angle.sin());
            let dist = nf * rng.gen_range(0.12..0.35);
            let amp = nf * rng.gen_range(0.02..0.08);
            let wavelength = nf * rng.gen_range(0.3..0.8);
            let phase = rng.gen_range(0.0..2.0 * PI);
            Grid::from_fn(n, n, |r, c| {
                let (x, y) = (c as f64 - centre, r as f64 - centre);
                let normal = x * nx + y * ny;
                let tangent = -x * ny + y * nx;
                if normal > dist + amp * (2.0 * PI * tangent / wavelength + phase).sin() {
                    1.0
                } else {
                    0.0
                }
            })
        }
        WaterMode::Blobs | WaterMode::Mixed => {
            let count = rng.gen_range(2..=5);
            let blobs: Vec<(f64, f64, f64)> = (0..count)
                .map(|_| {
                    let r = rng.gen_range(0.0..nf);
                    let c = rng.gen_range(0.0..nf);
                    let rad = nf * rng.gen_range(0.04..0.12);
                    (r, c, rad)
                })
                .collect();
            Grid::from_fn(n, n, |r, c| {
                let wet = blobs
                    .iter()
                    .any(|&(br, bc, rad)| (r as f64 - br).powi(2) + (c as f64 - bc).powi(2) <= rad * rad);
                if wet {
                    1.0
                } else {
                    0.0
                }
            })
        }
    }
}

fn grow_built(params: &SynthParams, water: &Grid, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let n = params.size;
    let land: Vec<usize> = (0..n * n).filter(|&i| water.data()[i] == 0.0).collect();
    if land.len() < params.n_seeds {
        return Err(Error::Validation(format!("only {} land pixels for {} seeds", land.len(), params.n_seeds)));
    }
    let mut built = vec![false; n * n];
    let mut cells: Vec<usize> = Vec::with_capacity(params.n_seeds + params.growth_steps);
    let centre = (n as f64 - 1.0) / 2.0;

    // Nucleation: the first nucleus hugs the window centre, later ones scatter wider.
    for k in 0..params.n_seeds {
        let sigma = if k == 0 { n as f64 / 10.0 } else { n as f64 / 4.0 };
        let mut placed = false;
        for _ in 0..200 {
            let (r, c) = (centre + sigma * std_normal(rng), centre + sigma * std_normal(rng));
            let (r, c) = (r.round(), c.round());
            if r < 0.0 || c < 0.0 || r >= n as f64 || c >= n as f64 {
                continue;
            }
            let idx = r as usize * n + c as usize;
            if water.data()[idx] == 0.0 && !built[idx] {
                built[idx] = true;
                cells.push(idx);
                placed = true;
                break;
            }
        }
        if !placed {
            // Crowded or wet centre: fall back to a uniformly drawn free land pixel.
            let free: Vec<usize> = land.iter().copied().filter(|&i| !built[i]).collect();
            let idx = free[rng.gen_range(0..free.len())];
            built[idx] = true;
            cells.push(idx);
        }
    }

    let reach = (3.0 * params.tau).ceil() as isize;
    let max_attempts = params.growth_steps.saturating_mul(200).max(1000);
    let mut added = 0;
    let mut attempts = 0;
    while added < params.growth_steps && attempts < max_attempts {
        attempts += 1;
        let anchor = cells[rng.gen_range(0..cells.len())];
        let (ar, ac) = ((anchor / n) as f64, (anchor % n) as f64);
        // Mostly accretion onto a neighbour; occasionally a long jump whose
        // length is exponential with mean τ.
        let (r, c) = if rng.gen::<f64>() < JUMP_PROB {
            let len = 1.0 - params.tau * rng.gen_range(f64::MIN_POSITIVE..1.0f64).ln();
            let theta = rng.gen_range(0.0..2.0 * PI);
            ((ar + len * theta.sin()).round() as isize, (ac + len * theta.cos()).round() as isize)
        } else {
            (ar as isize + rng.gen_range(-1..=1), ac as isize + rng.gen_range(-1..=1))
        };
        if r < 0 || c < 0 || r >= n as isize || c >= n as isize {
            continue;
        }
        let idx = r as usize * n + c as usize;
        if built[idx] || water.data()[idx] != 0.0 {
            continue;
        }
        let d = nearest_built(&built, n, r, c, reach);
        if rng.gen::<f64>() < (-(d - 1.0) / params.tau).exp() {
            built[idx] = true;
            cells.push(idx);
            added += 1;
        }
    }
    Ok(built)
}

fn nearest_built(built: &[bool], n: usize, r: isize, c: isize, reach: isize) -> f64 {
    let mut best = f64::INFINITY;
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            let (rr, cc) = (r + dr, c + dc);
            if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize {
                continue;
            }
            if built[rr as usize * n + cc as usize] {
                best = best.min(((dr * dr + dc * dc) as f64).sqrt());
            }
        }
    }
    best
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_blur(grid: &Grid, sigma: f64) -> Grid {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let (w, h) = (grid.width() as isize, grid.height() as isize);
    let pass = |src: &Grid, horizontal: bool| {
        Grid::from_fn(w as usize, h as usize, |r, c| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &kv) in kernel.iter().enumerate() {
                let d = k as isize - radius;
                let (rr, cc) = if horizontal { (r as isize, c as isize + d) } else { (r as isize + d, c as isize) };
                if rr >= 0 && cc >= 0 && rr < h && cc < w {
                    acc += kv * src.get(rr as usize, cc as usize) as f64;
                    norm += kv;
                }
            }
            (acc / norm) as f32
        })
    };
    pass(&pass(grid, true), false)
}

fn normalize_max(grid: &Grid) -> Grid {
    let max = grid.data().iter().fold(0.0f32, |m, &v| m.max(v));
    if max > 0.0 {
        grid.map(|v| v / max)
    } else {
        grid.clone()
    }
}

fn smooth_noise(n: usize, rng: &mut ChaCha8Rng) -> Grid {
    let white = Grid::from_fn(n, n, |_, _| rng.gen::<f32>());
    let blurred = gaussian_blur(&white, n as f64 / 10.0);
    let (lo, hi) = blurred.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        blurred.map(|v| (v - lo) / (hi - lo))
    } else {
        Grid::filled(n, n, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub city_id: String,
    pub seed: u64,
    pub split: Split,
    /// Tile path relative to the manifest's directory.
    pub path: String,
}

/// FNV-1a, 64 bit.
pub fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Deterministic train/test assignment: ids are ranked by `(fnv1a64(id), id)`
/// and the first `round(n·test_fraction)` of them form the test split.
pub fn assign_splits(ids: &[String], test_fraction: f64) -> Vec<Split> {
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| (id_hash(&ids[a]), &ids[a]).cmp(&(id_hash(&ids[b]), &ids[b])));
    let mut splits = vec![Split::Train; ids.len()];
    for &i in order.iter().take(n_test) {
        splits[i] = Split::Test;
    }
    splits
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetOptions {
    pub test_fraction: f64,
    /// Redraw seed count and growth budget per city (see [`SynthParams::jittered`]).
    pub jitter: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions { test_fraction: 0.1, jitter: true }
    }
}

/// Write `n` tiles with seeds `base_seed..base_seed+n` plus `manifest.jsonl`.
pub fn generate_dataset(
    out_dir: impl AsRef<Path>,
    n: usize,
    base_seed: u64,
    params: &SynthParams,
    opts: &DatasetOptions,
) -> Result<Vec<ManifestEntry>> {
    let out_dir = out_dir.as_ref();
    if n == 0 {
        return Err(Error::Validation("dataset needs at least one city".into()));
    }
    params.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let ids: Vec<String> = seeds.iter().map(|&s| city_id_for_seed(s)).collect();
    let splits = assign_splits(&ids, opts.test_fraction);

    let entries: Vec<ManifestEntry> = seeds
        .par_iter()
        .zip(ids.par_iter())
        .zip(splits.par_iter())
        .map(|((&seed, id), &split)| {
            let p = if opts.jitter { params.jittered(seed) } else { SynthParams { seed, ..*params } };
            let stack = generate_city(&p)?;
            let file = format!("{id}.tile");
            save_tile(&stack, out_dir.join(&file))?;
            Ok(ManifestEntry { city_id: id.clone(), seed, split, path: file })
        })
        .collect::<Result<_>>()?;
    write_manifest(out_dir, &entries)?;
    Ok(entries)
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let path = dir.join(MANIFEST_NAME);
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    for e in entries {
        let line = serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Read `manifest.jsonl` from a dataset directory.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST_NAME);
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Absolute tile path of a manifest entry.
pub fn entry_path(dir: impl AsRef<Path>, entry: &ManifestEntry) -> PathBuf {
    dir.as_ref().join(&entry.path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(seed: u64) -> SynthParams {
        SynthParams { seed, ..SynthParams::default() }
    }

    #[test]
    fn nucleation_only() {
        let p = SynthParams { n_seeds: 3, growth_steps: 0, ..params(5) };
        let s = generate_city(&p).unwrap();
        let bld = s.layer(LayerId::Bld).unwrap();
        assert_eq!(bld.data().iter().filter(|&&v| v != 0.0).count(), 3);
    }

    #[test]
    fn no_water_mode() {
        let s = generate_city(&SynthParams { water_mode: WaterMode::None, ..params(9) }).unwrap();
        assert!(s.layer(LayerId::Water).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_city(&params(42)).unwrap();
        assert_eq!(a, generate_city(&params(42)).unwrap());
        assert_ne!(a.layer(LayerId::Bld), generate_city(&params(43)).unwrap().layer(LayerId::Bld));
    }

    #[test]
    fn degenerate_params_rejected() {
        let p = SynthParams { n_seeds: 0, growth_steps: 10, ..params(1) };
        assert!(matches!(generate_city(&p), Err(Error::Validation(_))));
        assert!(generate_city(&SynthParams { size: 8, ..params(1) }).is_err());
    }

    #[test]
    fn built_never_on_water_for_all_modes() {
        for (k, mode) in [WaterMode::River, WaterMode::Coast, WaterMode::Blobs, WaterMode::Mixed].into_iter().enumerate() {
            for seed in 0..5 {
                let s = generate_city(&SynthParams { water_mode: mode, ..params(seed * 10 + k as u64) }).unwrap();
                let (b, w) = (s.layer(LayerId::Bld).unwrap(), s.layer(LayerId::Water).unwrap());
                assert!(b.data().iter().zip(w.data()).all(|(&b, &w)| b * w == 0.0));
                assert!(w.data().iter().any(|&v| v == 1.0), "{mode:?} produced no water");
            }
        }
    }

    #[test]
    fn hash_split_of_ten_has_one_test_city() {
        let ids: Vec<String> = (0..10).map(city_id_for_seed).collect();
        let splits = assign_splits(&ids, 0.1);
        assert_eq!(splits.iter().filter(|&&s| s == Split::Test).count(), 1);
        // The test city is the one with the smallest FNV-1a hash.
        let min = ids.iter().min_by_key(|id| (id_hash(id), (*id).clone())).unwrap();
        let test = ids.iter().zip(&splits).find(|(_, &s)| s == Split::Test).unwrap().0;
        assert_eq!(test, min);
        assert_eq!(assign_splits(&ids[..1], 0.1), vec![Split::Train]);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(id_hash(""), 0xcbf29ce484222325);
        assert_eq!(id_hash("a"), 0xaf63dc4c8601ec8c);
    }
}
