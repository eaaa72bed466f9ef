//! Distance-decay profiles of gradient magnitude sampled along random rays.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// How ray directions are drawn. Either way each direction is uniform on the circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleSampling {
    /// `m` evenly spaced directions under one random rotation.
    Fan,
    /// `m` independent directions.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayOptions {
    pub rays: usize,
    pub sampling: AngleSampling,
    pub bin_km: f64,
    pub km_per_px: f64,
    /// Profile extent; defaults to the distance to the farthest image corner.
    pub max_km: Option<f64>,
    pub step_px: f64,
    pub seed: u64,
}

impl Default for RayOptions {
    fn default() -> Self {
        RayOptions { rays: 50, sampling: AngleSampling::Fan, bin_km: 7.0, km_per_px: 100.0 / 64.0, max_km: None, step_px: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayProfile {
    /// Bin edges in km, strictly increasing.
    pub edges: Vec<f64>,
    /// Mean |g| per bin; `None` where no sample reached the bin.
    pub means: Vec<Option<f64>>,
    pub rays: usize,
    pub normalization: String,
}

impl DecayProfile {
    pub fn bins(&self) -> usize {
        self.means.len()
    }

    pub fn center(&self, bin: usize) -> f64 {
        0.5 * (self.edges[bin] + self.edges[bin + 1])
    }
}

struct Frame<'a> {
    values: &'a [f64],
    width: usize,
    height: usize,
}

impl Frame<'_> {
    fn inside(&self, y: f64, x: f64) -> bool {
        const EPS: f64 = 1e-9;
        y >= -EPS && x >= -EPS && y <= (self.height - 1) as f64 + EPS && x <= (self.width - 1) as f64 + EPS
    }

    /// Bilinear |g| at pixel-centre coordinates.
    fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (r0, c0) = (y.floor() as usize, x.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(self.height - 1), (c0 + 1).min(self.width - 1));
        let (fy, fx) = (y - r0 as f64, x - c0 as f64);
        let v = |r: usize, c: usize| self.values[r * self.width + c].abs();
        (1.0 - fy) * ((1.0 - fx) * v(r0, c0) + fx * v(r0, c1)) + fy * ((1.0 - fx) * v(r1, c0) + fx * v(r1, c1))
    }
}

fn frame<'a>(values: &'a [f64], width: usize, height: usize, origin: (f64, f64)) -> Result<Frame<'a>> {
    if width == 0 || height == 0 || values.len() != width * height {
        return Err(Error::Shape(format!("field of {} values is not {width}x{height}", values.len())));
    }
    let f = Frame { values, width, height };
    if !f.inside(origin.0, origin.1) {
        return Err(Error::Validation(format!("ray origin {origin:?} lies outside the image")));
    }
    Ok(f)
}

fn edges(f: &Frame, origin: (f64, f64), bin_km: f64, km_per_px: f64, max_km: Option<f64>) -> Result<Vec<f64>> {
    if !(bin_km > 0.0) || !(km_per_px > 0.0) {
        return Err(Error::Validation(format!("bin width {bin_km} km and pixel size {km_per_px} km must be positive")));
    }
    let max_km = match max_km {
        Some(m) if m > 0.0 => m,
        Some(m) => return Err(Error::Validation(format!("max_km must be positive, got {m}"))),
        None => {
            let (h, w) = ((f.height - 1) as f64, (f.width - 1) as f64);
            let corners = [(0.0, 0.0), (0.0, w), (h, 0.0), (h, w)];
            let far = corners
                .iter()
                .map(|&(r, c): &(f64, f64)| ((r - origin.0).powi(2) + (c - origin.1).powi(2)).sqrt())
                .fold(0.0, f64::max);
            (far * km_per_px).max(bin_km)
        }
    };
    let n = (max_km / bin_km).ceil().max(1.0) as usize;
    Ok((0..=n).map(|k| k as f64 * bin_km).collect())
}

/// Order-independent mean.
fn mean_sorted(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Profile along rays at the given angles (radians; 0 points along +col,
/// π/2 towards row 0).
pub fn ray_profile_at_angles(
    values: &[f64],
    width: usize,
    height: usize,
    origin: (f64, f64),
    angles: &[f64],
    opts: &RayOptions,
) -> Result<DecayProfile> {
    let f = frame(values, width, height, origin)?;
    if angles.is_empty() {
        return Err(Error::Validation("need at least one ray".into()));
    }
    if !(opts.step_px > 0.0) {
        return Err(Error::Validation(format!("ray step must be positive, got {}", opts.step_px)));
    }
    let edges = edges(&f, origin, opts.bin_km, opts.km_per_px, opts.max_km)?;
    let bins = edges.len() - 1;
    let max_km = edges[bins];
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for &theta in angles {
        let (dy, dx) = (-theta.sin(), theta.cos());
        let mut sums = vec![(0.0, 0usize); bins];
        for k in 0.. {
            let t = k as f64 * opts.step_px;
            let (y, x) = (origin.0 + t * dy, origin.1 + t * dx);
            let d = t * opts.km_per_px;
            if !f.inside(y, x) || d > max_km {
                break;
            }
            let b = ((d / opts.bin_km) as usize).min(bins - 1);
            sums[b].0 += f.sample(y, x);
            sums[b].1 += 1;
        }
        for (b, (s, n)) in sums.into_iter().enumerate() {
            if n > 0 {
                per_bin[b].push(s / n as f64);
            }
        }
    }
    Ok(DecayProfile {
        edges,
        means: per_bin.into_iter().map(mean_sorted).collect(),
        rays: angles.len(),
        normalization: "none".into(),
    })
}

/// Seeded ray directions in radians.
pub fn ray_angles(opts: &RayOptions) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let m = opts.rays as f64;
    match opts.sampling {
        AngleSampling::Fan => {
            let u: f64 = rng.gen();
            (0..opts.rays).map(|k| TAU * (k as f64 + u) / m).collect()
        }
        AngleSampling::Independent => (0..opts.rays).map(|_| rng.gen::<f64>() * TAU).collect(),
    }
}

/// Profile along `opts.rays` seeded rays.
pub fn ray_profile(values: &[f64], width: usize, height: usize, origin: (f64, f64), opts: &RayOptions) -> Result<DecayProfile> {
    if opts.rays == 0 {
        return Err(Error::Validation("need at least one ray".into()));
    }
    ray_profile_at_angles(values, width, height, origin, &ray_angles(opts), opts)
}

/// Mean |g| over whole pixels grouped by their distance from `origin`.
pub fn pixel_binned_profile(
    values: &[f64],
    width: usize,
    height: usize,
    origin: (f64, f64),
    bin_km: f64,
    km_per_px: f64,
    max_km: Option<f64>,
) -> Result<DecayProfile> {
    let f = frame(values, width, height, origin)?;
    let edges = edges(&f, origin, bin_km, km_per_px, max_km)?;
    let bins = edges.len() - 1;
    let mut sums = vec![(0.0, 0usize); bins];
    for r in 0..height {
        for c in 0..width {
            let d = ((r as f64 - origin.0).powi(2) + (c as f64 - origin.1).powi(2)).sqrt() * km_per_px;
            if d > edges[bins] {
                continue;
            }
            let b = ((d / bin_km) as usize).min(bins - 1);
            sums[b].0 += values[r * width + c].abs();
            sums[b].1 += 1;
        }
    }
    Ok(DecayProfile {
        edges,
        means: sums.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect(),
        rays: 0,
        normalization: "none".into(),
    })
}

/// Distribution of log-normalized magnitude across the cities of one group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub group: String,
    pub bin_lo_km: f64,
    pub bin_hi_km: f64,
    /// min, Q1, median, Q3, max of `log10(m_bin / Σ m)`.
    pub q: [f64; 5],
    pub mean_log: f64,
    pub cities: usize,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-city `log10(m_bin / Σ_bins m)` pooled by group and bin.
///
/// Cities whose profile sums to zero contribute nothing; groups left empty
/// are dropped.
pub fn aggregate_profiles(profiles: &[(String, DecayProfile)]) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<&str, Vec<&DecayProfile>> = BTreeMap::new();
    for (g, p) in profiles {
        groups.entry(g.as_str()).or_default().push(p);
    }
    let mut rows = Vec::new();
    for (group, members) in groups {
        let mut edges: Vec<f64> = Vec::new();
        let mut pooled: Vec<Vec<f64>> = Vec::new();
        for p in members {
            let shared = edges.len().min(p.edges.len());
            if edges[..shared] != p.edges[..shared] {
                return Err(Error::Validation(format!("profiles in group {group:?} use different bins")));
            }
            if p.edges.len() > edges.len() {
                edges = p.edges.clone();
            }
            let total: f64 = p.means.iter().flatten().sum();
            if !(total > 0.0) {
                log::warn!("group {group}: skipping a profile with zero total magnitude");
                continue;
            }
            pooled.resize(edges.len() - 1, Vec::new());
            for (b, m) in p.means.iter().enumerate() {
                if let Some(m) = m.filter(|&m| m > 0.0) {
                    pooled[b].push((m / total).log10());
                }
            }
        }
        for (b, mut vals) in pooled.into_iter().enumerate() {
            if vals.is_empty() {
                continue;
            }
            vals.sort_by(f64::total_cmp);
            rows.push(AggregateRow {
                group: group.to_string(),
                bin_lo_km: edges[b],
                bin_hi_km: edges[b + 1],
                q: [0.0, 0.25, 0.5, 0.75, 1.0].map(|p| quantile(&vals, p)),
                mean_log: vals.iter().sum::<f64>() / vals.len() as f64,
                cities: vals.len(),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecaySummary {
    pub group: String,
    /// Share of bins after the second whose median does not exceed the previous bin's.
    pub monotone_fraction: f64,
    /// Lower edge of the first bin whose median share falls below 1%.
    pub d1_km: Option<f64>,
}

pub fn decay_summary(rows: &[AggregateRow]) -> Vec<DecaySummary> {
    let mut groups: BTreeMap<&str, Vec<&AggregateRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.group.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(group, mut rs)| {
            rs.sort_by(|a, b| a.bin_lo_km.total_cmp(&b.bin_lo_km));
            let tail: Vec<bool> = rs.windows(2).skip(1).map(|w| w[1].q[2] <= w[0].q[2]).collect();
            DecaySummary {
                group: group.to_string(),
                monotone_fraction: if tail.is_empty() {
                    1.0
                } else {
                    tail.iter().filter(|&&b| b).count() as f64 / tail.len() as f64
                },
                d1_km: rs.iter().find(|r| r.q[2] < -2.0).map(|r| r.bin_lo_km),
            }
        })
        .collect()
}

pub const AGGREGATE_CSV_HEADER: &str = "group,bin_lo_km,bin_hi_km,q0,q1,q2,q3,q4,mean_log";

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut out = format!("{AGGREGATE_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.group, r.bin_lo_km, r.bin_hi_km, r.q[0], r.q[1], r.q[2], r.q[3], r.q[4], r.mean_log
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radial(n: usize, origin: (f64, f64), km_per_px: f64, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..n * n)
            .map(|i| {
                let (r, c) = ((i / n) as f64, (i % n) as f64);
                f(((r - origin.0).powi(2) + (c - origin.1).powi(2)).sqrt() * km_per_px)
            })
            .collect()
    }

    #[test]
    fn exponential_field_matches_bin_centres() {
        let (n, origin, kpp) = (257, (128.0, 128.0), 0.02);
        let field = radial(n, origin, kpp, |d| (-d).exp());
        let opts = RayOptions { rays: 50, sampling: AngleSampling::Fan, bin_km: 0.2, km_per_px: kpp, max_km: Some(2.5), seed: 3, ..Default::default() };
        let p = ray_profile(&field, n, n, origin, &opts).unwrap();
        assert_eq!(p.bins(), 13);
        for b in 0..p.bins() - 1 {
            let want = (-p.center(b)).exp();
            let got = p.means[b].unwrap();
            assert!((got / want - 1.0).abs() < 0.05, "bin {b}: {got} vs {want}");
        }
    }

    #[test]
    fn single_ray_equals_its_bin_means() {
        // Nonzero only on row 4, to the right of the origin at (4, 0).
        let (w, h) = (20, 9);
        let field: Vec<f64> = (0..w * h).map(|i| if i / w == 4 { (i % w) as f64 } else { 0.0 }).collect();
        let opts = RayOptions { bin_km: 5.0, km_per_px: 1.0, ..Default::default() };
        let p = ray_profile_at_angles(&field, w, h, (4.0, 0.0), &[0.0], &opts).unwrap();
        // Samples at 0, 0.5, …, 19 px; bins [0,5), [5,10), [10,15), [15,20].
        let mean = |lo: f64, hi: f64, last: bool| {
            let ts: Vec<f64> = (0..=38).map(|k| k as f64 * 0.5).filter(|&t| t >= lo && (t < hi || last)).collect();
            ts.iter().sum::<f64>() / ts.len() as f64
        };
        let want = [mean(0.0, 5.0, false), mean(5.0, 10.0, false), mean(10.0, 15.0, false), mean(15.0, 20.0, true)];
        assert!(p.means.len() >= 4);
        for b in 0..4 {
            assert!((p.means[b].unwrap() - want[b]).abs() < 1e-12, "bin {b}");
        }
    }

    #[test]
    fn dense_rays_agree_with_pixel_binning() {
        let (n, origin, kpp) = (64, (30.0, 34.0), 100.0 / 64.0);
        let field: Vec<f64> = (0..n * n)
            .map(|i| {
                let (r, c) = ((i / n) as f64, (i % n) as f64);
                let d = ((r - origin.0).powi(2) + (c - origin.1).powi(2)).sqrt() * kpp;
                (-d / 25.0).exp() * (1.0 + 0.3 * (c / n as f64))
            })
            .collect();
        let opts = RayOptions { rays: 720, seed: 1, km_per_px: kpp, ..Default::default() };
        let rays = ray_profile(&field, n, n, origin, &opts).unwrap();
        let pix = pixel_binned_profile(&field, n, n, origin, 7.0, kpp, None).unwrap();
        assert_eq!(rays.edges, pix.edges);
        for (b, (a, p)) in rays.means.iter().zip(&pix.means).enumerate() {
            if let (Some(a), Some(p)) = (a, p) {
                assert!((a / p - 1.0).abs() < 0.10, "bin {b}: rays {a} pixels {p}");
            }
        }
    }

    #[test]
    fn ray_order_does_not_matter() {
        let (n, origin) = (32, (10.0, 12.0));
        let field: Vec<f64> = (0..n * n).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let opts = RayOptions { bin_km: 3.0, km_per_px: 1.0, ..Default::default() };
        let angles: Vec<f64> = (0..40).map(|k| k as f64 * 0.157).collect();
        let mut rev = angles.clone();
        rev.reverse();
        let a = ray_profile_at_angles(&field, n, n, origin, &angles, &opts).unwrap();
        let b = ray_profile_at_angles(&field, n, n, origin, &rev, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.means.iter().flatten().all(|&m| m >= 0.0));
        assert!(a.edges.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rotation_by_quarter_turn() {
        let n = 65;
        let c = 32.0;
        let field: Vec<f64> = (0..n * n)
            .map(|i| {
                let (r, col) = ((i / n) as f64, (i % n) as f64);
                (-((r - c).powi(2) / 300.0 + (col - c).powi(2) / 120.0)).exp()
            })
            .collect();
        // Rotate 90°: new(r, c) = old(c, n-1-r).
        let rotated: Vec<f64> = (0..n * n).map(|i| field[(i % n) * n + (n - 1 - i / n)]).collect();
        for seed in 0..5 {
            let opts = RayOptions { seed, bin_km: 7.0, km_per_px: 1.0, max_km: Some(30.0), ..Default::default() };
            let a = ray_profile(&field, n, n, (c, c), &opts).unwrap();
            let b = ray_profile(&rotated, n, n, (c, c), &opts).unwrap();
            for (x, y) in a.means.iter().zip(&b.means) {
                let (x, y) = (x.unwrap(), y.unwrap());
                assert!((x / y - 1.0).abs() < 0.02, "seed {seed}: {x} vs {y}");
            }
        }
        // Independent directions turned with the field give the same samples.
        let opts = RayOptions { sampling: AngleSampling::Independent, bin_km: 7.0, km_per_px: 1.0, ..Default::default() };
        let angles = ray_angles(&opts);
        let turned: Vec<f64> = angles.iter().map(|a| a - std::f64::consts::FRAC_PI_2).collect();
        let a = ray_profile_at_angles(&field, n, n, (c, c), &angles, &opts).unwrap();
        let b = ray_profile_at_angles(&rotated, n, n, (c, c), &turned, &opts).unwrap();
        for (x, y) in a.means.iter().zip(&b.means) {
            let (x, y) = (x.unwrap(), y.unwrap());
            assert!((x / y - 1.0).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn origin_and_option_errors() {
        let field = vec![1.0; 16];
        let opts = RayOptions::default();
        assert!(ray_profile(&field, 4, 4, (5.0, 0.0), &opts).is_err());
        assert!(ray_profile(&field, 4, 4, (1.0, 1.0), &RayOptions { rays: 0, ..opts }).is_err());
        assert!(ray_profile(&field, 4, 4, (1.0, 1.0), &RayOptions { bin_km: 0.0, ..opts }).is_err());
        assert!(ray_profile(&field[..15], 4, 4, (1.0, 1.0), &opts).is_err());
    }

    fn profile(means: &[f64]) -> DecayProfile {
        DecayProfile {
            edges: (0..=means.len()).map(|k| 7.0 * k as f64).collect(),
            means: means.iter().map(|&m| Some(m)).collect(),
            rays: 50,
            normalization: "none".into(),
        }
    }

    #[test]
    fn aggregation_cases() {
        let one = aggregate_profiles(&[("g".into(), profile(&[4.0, 2.0, 1.0, 1.0]))]).unwrap();
        assert_eq!(one.len(), 4);
        for r in &one {
            assert!(r.q.iter().all(|&q| q == r.q[0]));
            assert_eq!(r.mean_log, r.q[0]);
        }
        assert!((one[0].q[2] - (0.5f64).log10()).abs() < 1e-12);

        let twins = aggregate_profiles(&[("g".into(), profile(&[3.0, 1.0])), ("g".into(), profile(&[3.0, 1.0]))]).unwrap();
        assert!(twins.iter().all(|r| r.q[3] - r.q[1] == 0.0 && r.cities == 2));

        let dropped = aggregate_profiles(&[("z".into(), profile(&[0.0, 0.0])), ("g".into(), profile(&[1.0]))]).unwrap();
        assert!(dropped.iter().all(|r| r.group == "g"));

        let mut other = profile(&[1.0, 1.0]);
        other.edges = vec![0.0, 5.0, 10.0];
        assert!(aggregate_profiles(&[("g".into(), profile(&[1.0, 1.0])), ("g".into(), other)]).is_err());
    }

    #[test]
    fn quartiles_interpolate() {
        let rows = aggregate_profiles(
            &[1.0, 2.0, 3.0, 4.0, 5.0].map(|k: f64| ("g".to_string(), profile(&[1.0, 10f64.powf(k) - 1.0]))),
        )
        .unwrap();
        // Bin 0 holds log10(1/10^k) = -k for k = 1..5.
        assert_eq!(rows[0].q, [-5.0, -4.0, -3.0, -2.0, -1.0]);
    }

    #[test]
    fn summary_of_a_decaying_group() {
        let means: Vec<f64> = (0..8).map(|k| (-(k as f64)).exp()).collect();
        let rows = aggregate_profiles(&[("g".into(), profile(&means))]).unwrap();
        let s = &decay_summary(&rows)[0];
        assert_eq!(s.monotone_fraction, 1.0);
        let total: f64 = means.iter().sum();
        let first = means.iter().position(|m| m / total < 0.01).unwrap();
        assert_eq!(s.d1_km, Some(7.0 * first as f64));
    }
}
