use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use geogan::autodiff::{primitive_suite, FdOptions, Primitive};
use geogan::gan::{
    self, load_checkpoint, train_on, GanConfig, InputMode, ModelCheckpoint, Sampling, TrainOptions, LOG_NAME,
};
use geogan::raster::{export_heatmap_png, export_png, load_tile, save_tile, ChannelMap, CityStack, LayerId};
use geogan::sensitivity::{
    aggregate_profiles, build_similarity_index, city_input, city_region, decay_summary, gradient_fd_check,
    input_gradient, ray_profile, save_gradient_tile, spillover_fraction, write_aggregate_csv, CheckpointModel,
    DecayProfile, Factor, GradientModel, RayOptions, RegionMode,
};
use geogan::stats::{
    city_stats, compare_stats, pearson_r2, write_histograms_json, write_scatter_csv, write_stats_csv, Connectivity,
    Source, StatsOptions, StatsRecord,
};
use geogan::synth::{
    self, entry_path, generate_dataset, id_hash, read_manifest, write_manifest, DatasetOptions, ManifestEntry, Split,
    SynthParams, WaterMode,
};
use geogan::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::plot;
use crate::{
    Command, GenerateArgs, GradcheckArgs, SensitivityArgs, SimilarArgs, StatsArgs, SynthArgs, TrainArgs,
};

pub const RUN_FILE: &str = "run.json";
const PRIMITIVE_TOL: f64 = 1e-4;
const SENSITIVITY_TOL: f64 = 1e-3;

/// Everything needed to replay an invocation.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub threads: usize,
    /// Value of GEOGAN_LOG at launch, if set.
    pub log_filter: Option<String>,
    pub command: Command,
}

pub fn execute(threads: Option<usize>, command: Command) -> Result<()> {
    let (threads, command) = match command {
        Command::Rerun(args) => {
            let path = &args.run_json;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let record: RunRecord = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let mut command = record.command;
            if let Some(out) = args.out {
                *out_dir_mut(&mut command) = out;
            }
            (threads.or(Some(record.threads)), command)
        }
        other => (threads, other),
    };
    let threads = configure_threads(threads)?;
    write_run_record(threads, &command)?;
    run(command)
}

fn configure_threads(threads: Option<usize>) -> Result<usize> {
    if threads == Some(0) {
        return Err(Error::Validation("--threads must be at least 1".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    if let Err(e) = builder.build_global() {
        log::warn!("thread pool already initialised: {e}");
    }
    Ok(rayon::current_num_threads())
}

fn out_dir_mut(command: &mut Command) -> &mut PathBuf {
    match command {
        Command::Synth(a) => &mut a.out,
        Command::Train(a) => &mut a.out,
        Command::Generate(a) => &mut a.out,
        Command::Stats(a) => &mut a.out,
        Command::Sensitivity(a) => &mut a.out,
        Command::Similar(a) => &mut a.out,
        Command::Gradcheck(a) => &mut a.out,
        Command::Rerun(_) => unreachable!("rerun is resolved before dispatch"),
    }
}

fn write_run_record(threads: usize, command: &Command) -> Result<()> {
    let mut command = command.clone();
    let out = out_dir_mut(&mut command).clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let record = RunRecord {
        tool: "geogan".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        threads,
        log_filter: std::env::var("GEOGAN_LOG").ok(),
        command,
    };
    write_json(&out.join(RUN_FILE), &record)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Stats(a) => stats(a),
        Command::Sensitivity(a) => sensitivity(a),
        Command::Similar(a) => similar(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Rerun(_) => unreachable!("rerun is resolved before dispatch"),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Missing inputs are a usage error, not an I/O failure.
fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} not found: {}", path.display())))
    }
}

fn require_dataset(dir: &Path) -> Result<Vec<ManifestEntry>> {
    require(&dir.join(synth::MANIFEST_NAME), "dataset manifest")?;
    read_manifest(dir)
}

fn require_model(path: &Path) -> Result<ModelCheckpoint> {
    require(path, "model checkpoint")?;
    load_checkpoint(path)
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(Error::Validation(format!("unknown split {other:?}; expected train, test or all"))),
    }
}

fn select(entries: Vec<ManifestEntry>, split: Option<Split>) -> Vec<ManifestEntry> {
    entries.into_iter().filter(|e| split.is_none_or(|s| e.split == s)).collect()
}

fn load_entries(dir: &Path, entries: &[ManifestEntry]) -> Result<Vec<CityStack>> {
    entries.par_iter().map(|e| load_tile(entry_path(dir, e))).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn synth(a: SynthArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(Error::Validation(format!("--test-fraction must lie in [0,1), got {}", a.test_fraction)));
    }
    let water_mode: WaterMode = a.water_mode.parse()?;
    let params = SynthParams { size: a.size, water_mode, ..SynthParams::default() };
    let opts = DatasetOptions { test_fraction: a.test_fraction, jitter: !a.no_jitter };
    let entries = generate_dataset(&a.out, a.n, a.seed, &params, &opts)?;
    let test = entries.iter().filter(|e| e.split == Split::Test).count();
    log::info!("wrote {} cities ({} train, {test} test) to {}", entries.len(), entries.len() - test, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    split: &'static str,
    cities: usize,
    mean_overlap: f64,
    mean_l1: f64,
    mean_l1_zero: f64,
    r2_a: Option<f64>,
}

fn train(a: TrainArgs) -> Result<()> {
    let config = GanConfig {
        size: a.size,
        base_width: a.base_width,
        depth: a.depth,
        dropout: a.dropout,
        lambda: a.lambda,
        alpha: a.alpha,
        adam: geogan::autodiff::AdamConfig { lr: a.lr, ..Default::default() },
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        input_mode: a.mode.parse()?,
    };
    config.validate()?;
    if !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(Error::Config(format!("--lr must be positive, got {}", a.lr)));
    }
    let entries = require_dataset(&a.data)?;
    let train_set = load_entries(&a.data, &select(entries.clone(), Some(Split::Train)))?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        checkpoint_every: a.checkpoint_every,
        record_wall_time: a.wall_time,
        include_constraint: true,
    };
    log::info!("training on {} cities for {} epochs", train_set.len(), config.epochs);
    let outcome = train_on(&train_set, &config, &opts)?;
    log::info!("wrote {} and {}", a.out.join(gan::MODEL_NAME).display(), a.out.join(LOG_NAME).display());

    let test_set = load_entries(&a.data, &select(entries, Some(Split::Test)))?;
    if test_set.is_empty() {
        log::warn!("no test cities; skipping held-out evaluation");
        return Ok(());
    }
    let s = gan::evaluate(&outcome.checkpoint, &test_set)?;
    let r2_a = pearson_r2(&s.a_real, &s.a_generated).ok();
    let report = EvalReport {
        split: "test",
        cities: s.cities,
        mean_overlap: s.mean_overlap,
        mean_l1: s.mean_l1,
        mean_l1_zero: s.mean_l1_zero,
        r2_a,
    };
    log::info!(
        "held-out: overlap {:.5}, L1 {:.4} (zeros {:.4}), R²(a) {}",
        s.mean_overlap,
        s.mean_l1,
        s.mean_l1_zero,
        fmt_opt(r2_a)
    );
    write_json(&a.out.join("eval.json"), &report)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let ckpt = require_model(&a.model)?;
    let mode = match &a.mode {
        Some(m) => m.parse()?,
        None => ckpt.config.input_mode,
    };
    let entries = select(require_dataset(&a.data)?, parse_split(&a.split)?);
    if entries.is_empty() {
        return Err(Error::Validation(format!("no cities in split {:?} of {}", a.split, a.data.display())));
    }
    let png_dir = a.out.join("png");
    mkdir(&png_dir)?;
    let sample_dir = a.out.join("samples");
    if a.samples > 0 {
        mkdir(&sample_dir)?;
    }
    let written: Vec<ManifestEntry> = entries
        .par_iter()
        .map(|e| {
            let stack = load_tile(entry_path(&a.data, e))?;
            let pred = gan::generate(&ckpt, &stack, mode, Sampling::Deterministic)?;
            let out = stack.with_layer(LayerId::Bld, pred, stack.is_normalized(LayerId::Bld))?;
            let file = format!("{}.tile", e.city_id);
            save_tile(&out, a.out.join(&file))?;
            export_png(&out, png_dir.join(format!("{}.png", e.city_id)), &ChannelMap::default())?;
            if a.samples > 0 {
                let base = a.seed ^ id_hash(&e.city_id);
                let seeds: Vec<u64> = (0..a.samples as u64).map(|k| base.wrapping_add(k)).collect();
                for (k, grid) in gan::generate_samples(&ckpt, &stack, mode, &seeds)?.iter().enumerate() {
                    export_heatmap_png(grid, sample_dir.join(format!("{}_{k:02}.png", e.city_id)))?;
                }
            }
            Ok(ManifestEntry { path: file, ..e.clone() })
        })
        .collect::<Result<_>>()?;
    write_manifest(&a.out, &written)?;
    log::info!("generated {} built maps in {}", written.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct StatsReport {
    real_dir: PathBuf,
    generated_dir: PathBuf,
    pairs: usize,
    r2_a: Option<f64>,
    r2_f: Option<f64>,
    dropped: Vec<String>,
}

fn stats_for(dir: &Path, entries: &[ManifestEntry], source: Source, opts: &StatsOptions) -> Result<Vec<StatsRecord>> {
    entries
        .par_iter()
        .map(|e| {
            let stack = load_tile(entry_path(dir, e))?;
            city_stats(stack.require(LayerId::Bld)?, &e.city_id, source, stack.window_km(), opts)
        })
        .collect()
}

fn stats(a: StatsArgs) -> Result<()> {
    let opts = StatsOptions { threshold: a.threshold, connectivity: a.connectivity.parse()?, ..StatsOptions::default() };
    let real_entries = select(require_dataset(&a.data)?, parse_split(&a.split)?);
    let gen_entries = match &a.generated {
        Some(dir) => Some(require_dataset(dir)?),
        None => None,
    };
    let mut records = stats_for(&a.data, &real_entries, Source::Real, &opts)?;
    let real_count = records.len();
    if let (Some(dir), Some(entries)) = (&a.generated, &gen_entries) {
        records.extend(stats_for(dir, entries, Source::Generated, &opts)?);
    }
    write_stats_csv(&a.out.join("stats.csv"), &records)?;
    write_histograms_json(&a.out.join("histograms.json"), &records)?;
    log::info!("statistics for {} cities written to {}", records.len(), a.out.display());

    let Some(gen_dir) = a.generated else {
        return Ok(());
    };
    let report = compare_stats(&records[..real_count], &records[real_count..])?;
    write_scatter_csv(&a.out.join("scatter.csv"), &report)?;
    let pts_a: Vec<(f64, f64)> = report.pairs.iter().map(|p| (p.a_real, p.a_generated)).collect();
    let pts_f: Vec<(f64, f64)> = report.pairs.iter().map(|p| (p.f_real, p.f_generated)).collect();
    plot::scatter(&a.out.join("scatter_a.svg"), "built-area fraction", "a (real)", "a (generated)", &pts_a)?;
    plot::scatter(&a.out.join("scatter_f.svg"), "fractal dimension", "f (real)", "f (generated)", &pts_f)?;
    println!("R2(a) = {}", report.r2_a.map_or("undefined".into(), |v| format!("{v:.6}")));
    println!("R2(f) = {}", report.r2_f.map_or("undefined".into(), |v| format!("{v:.6}")));
    write_json(
        &a.out.join("report.json"),
        &StatsReport {
            real_dir: a.data,
            generated_dir: gen_dir,
            pairs: report.pairs.len(),
            r2_a: report.r2_a,
            r2_f: report.r2_f,
            dropped: report.dropped,
        },
    )
}

struct CityResult {
    city_id: String,
    roi_px: usize,
    value: f64,
    spill_pop: f64,
    spill_lum: f64,
    profiles: [DecayProfile; 2],
}

fn sensitivity_city(
    a: &SensitivityArgs,
    model: &CheckpointModel,
    region: RegionMode,
    conn: Connectivity,
    entry: &ManifestEntry,
) -> Result<CityResult> {
    let stack = load_tile(entry_path(&a.data, entry))?;
    let roi = city_region(&stack, region, a.threshold, conn)?;
    let input = city_input(&stack)?;
    let field = input_gradient(model, &input, &roi, &model.id)?;
    let id = &entry.city_id;
    let grad_dir = a.out.join("gradients");
    save_gradient_tile(&field, id, stack.km_per_px(), grad_dir.join(format!("{id}.grad")))?;
    for f in [Factor::Pop, Factor::Lum] {
        export_heatmap_png(&field.grid(f), grad_dir.join(format!("{id}_{}.png", f.as_str())))?;
    }
    let origin = match a.origin.as_str() {
        "centroid" => field.roi.centroid,
        "medoid" => field.roi.medoid(),
        other => return Err(Error::Validation(format!("unknown origin {other:?}; expected centroid or medoid"))),
    };
    let opts = RayOptions {
        rays: a.rays,
        bin_km: a.bin_km,
        km_per_px: stack.km_per_px(),
        max_km: a.max_km,
        seed: a.seed ^ id_hash(id),
        ..RayOptions::default()
    };
    let profile = |f: Factor| ray_profile(field.factor(f), field.width, field.height, origin, &opts);
    let s = spillover_fraction(&field);
    Ok(CityResult {
        city_id: id.clone(),
        roi_px: field.roi.len(),
        value: field.value,
        spill_pop: s.pop,
        spill_lum: s.lum,
        profiles: [profile(Factor::Pop)?, profile(Factor::Lum)?],
    })
}

fn sensitivity(a: SensitivityArgs) -> Result<()> {
    let region: RegionMode = a.region.parse()?;
    let conn: Connectivity = a.connectivity.parse()?;
    if !(a.bin_km > 0.0 && a.bin_km.is_finite()) {
        return Err(Error::Validation(format!("--bin-km must be positive, got {}", a.bin_km)));
    }
    if a.rays == 0 {
        return Err(Error::Validation("--rays must be at least 1".into()));
    }
    let ckpt = require_model(&a.model)?;
    let model = CheckpointModel::new(&ckpt)?;
    if model.input_mode() != InputMode::Factors {
        return Err(Error::Validation("sensitivity needs a model trained on factors input".into()));
    }
    let mut entries = select(require_dataset(&a.data)?, parse_split(&a.split)?);
    if let Some(n) = a.limit {
        entries.truncate(n);
    }
    if entries.is_empty() {
        return Err(Error::Validation(format!("no cities in split {:?} of {}", a.split, a.data.display())));
    }
    mkdir(&a.out.join("gradients"))?;

    let outcomes: Vec<Result<CityResult>> =
        entries.par_iter().map(|e| sensitivity_city(&a, &model, region, conn, e)).collect();
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for (e, r) in entries.iter().zip(outcomes) {
        match r {
            Ok(r) => results.push(r),
            Err(err @ Error::InsufficientPatches { .. }) => {
                log::warn!("{}: skipped, {err}", e.city_id);
                skipped.push(err);
            }
            Err(err) => return Err(err),
        }
    }
    if results.is_empty() {
        return Err(skipped.into_iter().next().expect("every city was skipped"));
    }

    let mut spill = String::from("city_id,region,roi_px,objective,spill_pop,spill_lum\n");
    let mut decay = String::from("city_id,group,bin_lo_km,bin_hi_km,mean_abs_grad\n");
    let mut grouped = Vec::new();
    for r in &results {
        let _ = writeln!(spill, "{},{},{},{},{},{}", r.city_id, region.as_str(), r.roi_px, r.value, r.spill_pop, r.spill_lum);
        for (group, p) in ["pop", "lum"].iter().zip(&r.profiles) {
            for (b, m) in p.means.iter().enumerate() {
                let _ = writeln!(decay, "{},{group},{},{},{}", r.city_id, p.edges[b], p.edges[b + 1], fmt_opt(*m));
            }
            grouped.push((group.to_string(), p.clone()));
        }
    }
    write_text(&a.out.join("spillover.csv"), &spill)?;
    write_text(&a.out.join("decay.csv"), &decay)?;
    let rows = aggregate_profiles(&grouped)?;
    write_aggregate_csv(&a.out.join("aggregate.csv"), &rows)?;
    write_json(&a.out.join("decay_summary.json"), &decay_summary(&rows))?;

    for group in ["pop", "lum"] {
        let boxes: Vec<(f64, [f64; 5])> = rows
            .iter()
            .filter(|r| r.group == group)
            .map(|r| (0.5 * (r.bin_lo_km + r.bin_hi_km), r.q))
            .collect();
        plot::boxes(
            &a.out.join(format!("decay_{group}.svg")),
            &format!("gradient decay ({group})"),
            "distance from region (km)",
            "log10 share of |gradient|",
            &boxes,
        )?;
    }
    for (group, vals) in [
        ("pop", results.iter().map(|r| r.spill_pop).collect::<Vec<_>>()),
        ("lum", results.iter().map(|r| r.spill_lum).collect()),
    ] {
        plot::histogram(
            &a.out.join(format!("spillover_{group}.svg")),
            &format!("spillover ({group})"),
            "fraction of |gradient| outside region",
            &vals,
            0.0,
            1.0,
            20,
        )?;
    }
    log::info!("sensitivity for {} cities ({} skipped) written to {}", results.len(), skipped.len(), a.out.display());
    Ok(())
}

fn similar(a: SimilarArgs) -> Result<()> {
    let ckpt = require_model(&a.model)?;
    let entries = select(require_dataset(&a.data)?, parse_split(&a.split)?);
    if a.k == 0 || a.k >= entries.len() {
        return Err(Error::Validation(format!("--k must lie in 1..{} for {} cities", entries.len(), entries.len())));
    }
    let features: Vec<Vec<f32>> = entries
        .par_iter()
        .map(|e| gan::extract_features(&ckpt, &load_tile(entry_path(&a.data, e))?))
        .collect::<Result<_>>()?;
    let ids: Vec<String> = entries.iter().map(|e| e.city_id.clone()).collect();

    let mut feat = String::from("city_id");
    for d in 0..features[0].len() {
        let _ = write!(feat, ",phi{d}");
    }
    feat.push('\n');
    for (id, v) in ids.iter().zip(&features) {
        feat.push_str(id);
        for x in v {
            let _ = write!(feat, ",{x}");
        }
        feat.push('\n');
    }
    write_text(&a.out.join("features.csv"), &feat)?;

    let index = build_similarity_index(ids.clone(), features)?;
    let queries: Vec<&String> = match &a.query {
        Some(q) => vec![ids
            .iter()
            .find(|id| *id == q)
            .ok_or_else(|| Error::Validation(format!("query city {q:?} is not in the dataset")))?],
        None => ids.iter().collect(),
    };
    let mut out = String::from("query,rank,neighbor,distance\n");
    for q in queries {
        let v = index.vector(q).expect("query id comes from the index").to_vec();
        let hits = index.knn_query(&v, a.k + 1)?;
        for (rank, n) in hits.iter().filter(|n| &n.id != q).take(a.k).enumerate() {
            let _ = writeln!(out, "{q},{},{},{}", rank + 1, n.id, n.distance);
        }
    }
    write_text(&a.out.join("neighbors.csv"), &out)?;
    log::info!("top-{} neighbours written to {}", a.k, a.out.join("neighbors.csv").display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let (prims, sens) = match a.scope.as_str() {
        "primitives" => (true, false),
        "sensitivity" => (false, true),
        "all" => (true, true),
        other => return Err(Error::Validation(format!("unknown scope {other:?}; expected primitives, sensitivity or all"))),
    };
    let mut failures = Vec::new();
    if prims {
        let fault = match &a.corrupt_primitive {
            Some(name) => Some(
                Primitive::from_name(name).ok_or_else(|| Error::Validation(format!("unknown primitive {name:?}")))?,
            ),
            None => None,
        };
        let opts = FdOptions { seed: a.seed, fault, ..FdOptions::default() };
        let checks = primitive_suite(a.seed, &opts)?;
        let mut csv = String::from("primitive,shapes,checked,skipped,max_rel_err,pass\n");
        for c in &checks {
            let pass = c.report.passes(PRIMITIVE_TOL);
            let shapes: Vec<String> =
                c.shapes.iter().map(|s| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")).collect();
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{pass}",
                c.primitive.name(),
                shapes.join(" "),
                c.report.checked(),
                c.report.skipped(),
                c.report.max_rel_err()
            );
            if !pass {
                failures.push(format!("{} (max rel err {:.3e})", c.primitive.name(), c.report.max_rel_err()));
            }
        }
        write_text(&a.out.join("primitives.csv"), &csv)?;
        println!("primitives: {}/{} pass (tol {PRIMITIVE_TOL:e})", checks.len() - failures.len(), checks.len());
    }
    if sens {
        let (model, stack) = sensitivity_fixture(&a)?;
        let roi = city_region(&stack, RegionMode::UrbanCore, geogan::stats::DEFAULT_THRESHOLD, Connectivity::Eight)?;
        let input = city_input(&stack)?;
        let checks = gradient_fd_check(&model, &input, &roi, a.samples, a.seed)?;
        let mut csv = String::from("factor,row,col,analytic,numeric,rel_err,pass\n");
        let mut bad = 0;
        for c in &checks {
            let pass = c.rel_err < SENSITIVITY_TOL;
            bad += usize::from(!pass);
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{pass}",
                c.factor.as_str(),
                c.row,
                c.col,
                c.analytic,
                c.numeric,
                c.rel_err
            );
        }
        write_text(&a.out.join("sensitivity_fd.csv"), &csv)?;
        let worst = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
        println!("sensitivity: {}/{} pixels pass (tol {SENSITIVITY_TOL:e}, worst {worst:.3e})", checks.len() - bad, checks.len());
        if bad > 0 {
            failures.push(format!("{bad} input pixels of city {}", stack.city_id()));
        }
        if checks.len() < a.samples {
            failures.push(format!("only {} of {} pixels could be scored", checks.len(), a.samples));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("finite-difference check failed: {}", failures.join("; "))))
    }
}

/// The model and city used for the sensitivity FD check.
fn sensitivity_fixture(a: &GradcheckArgs) -> Result<(CheckpointModel, CityStack)> {
    let (model, size) = match &a.model {
        Some(path) => {
            let ckpt = require_model(path)?;
            (CheckpointModel::new(&ckpt)?, ckpt.config.size)
        }
        None => {
            let config = GanConfig { seed: a.seed, ..GanConfig::default() };
            let gen = gan::Generator::new(&config, a.seed)?;
            (CheckpointModel::from_generator(&gen, config.input_mode, format!("fresh-{}", a.seed)), config.size)
        }
    };
    let stack = match &a.data {
        Some(dir) => {
            let entries = require_dataset(dir)?;
            let e = entries
                .iter()
                .find(|e| e.split == Split::Test)
                .or(entries.first())
                .ok_or_else(|| Error::Validation(format!("empty dataset {}", dir.display())))?;
            load_tile(entry_path(dir, e))?
        }
        None => synth::generate_city(&SynthParams { seed: a.seed, size, ..SynthParams::default() })?,
    };
    Ok((model, stack))
}
