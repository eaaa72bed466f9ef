use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::checkpoint::{save_checkpoint, ModelCheckpoint, RngState};
use super::net::bind;
use super::{
    batch_tensors, discriminator_loss, generator_loss, hard_overlap, model_inputs, Discriminator, GanConfig, Generator,
    ModelInputs,
};
use crate::autodiff::{Adam, Graph, Mode, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::raster::{load_tile, CityStack};
use crate::synth::{entry_path, read_manifest, Split};

pub const LOG_HEADER: &str = "step,epoch,L_cGAN_D,L_cGAN_G,L_L1,L_constr,overlap_rate,wall_ms";
pub const LOG_NAME: &str = "train_log.csv";
pub const MODEL_NAME: &str = "model.ckpt";

/// Scalars of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub step: u64,
    pub epoch: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub constr: f64,
    /// Hard water overlap of the batch's generated maps.
    pub overlap: f64,
    pub wall_ms: u64,
}

impl LossReport {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.d_loss, self.g_adv, self.l1, self.constr, self.overlap, self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Where to write `train_log.csv`, `model.ckpt` and periodic checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Write `checkpoint_epochNNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Fill the `wall_ms` column. Off by default so logs stay reproducible.
    pub record_wall_time: bool,
    /// Build the water penalty into the generator objective at all.
    pub include_constraint: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { out_dir: None, checkpoint_every: 10, record_wall_time: false, include_constraint: true }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub reports: Vec<LossReport>,
    pub log_csv: String,
}

/// Load the training split listed in a dataset directory's manifest.
pub fn load_split(data_dir: &Path, split: Split) -> Result<Vec<CityStack>> {
    read_manifest(data_dir)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_tile(entry_path(data_dir, e)))
        .collect()
}

pub fn train(data_dir: impl AsRef<Path>, config: &GanConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let stacks = load_split(data_dir.as_ref(), Split::Train)?;
    train_on(&stacks, config, opts)
}

struct Example {
    input: Tensor<f32>,
    water: Tensor<f32>,
    target: Tensor<f32>,
}

fn prepare(stacks: &[CityStack], config: &GanConfig) -> Result<Vec<Example>> {
    if stacks.is_empty() {
        return Err(Error::Validation("empty dataset: no training tiles".into()));
    }
    stacks
        .iter()
        .map(|s| {
            if s.width() != config.size || s.height() != config.size {
                return Err(Error::Validation(format!(
                    "tile {} is {}x{} but the model is configured for {}x{}",
                    s.city_id(),
                    s.width(),
                    s.height(),
                    config.size,
                    config.size
                )));
            }
            let ModelInputs { input, water, target } = model_inputs(s, config.input_mode)?;
            let target = target.ok_or_else(|| Error::Validation(format!("tile {} has no built layer", s.city_id())))?;
            Ok(Example { input, water, target })
        })
        .collect()
}

fn shapes(ps: &ParamSet<f32>) -> Vec<Vec<usize>> {
    ps.tensors().iter().map(|t| t.shape().to_vec()).collect()
}

fn new_adam(config: &GanConfig, ps: &ParamSet<f32>) -> Result<Adam<f32>> {
    let s = shapes(ps);
    Adam::new(config.adam, &s.iter().map(Vec::as_slice).collect::<Vec<_>>())
}

fn gather(grads: &mut crate::autodiff::Gradients<f32>, vars: &[Var], ps: &ParamSet<f32>) -> Vec<Tensor<f32>> {
    vars.iter().zip(ps.tensors()).map(|(&v, t)| grads.take_or_zeros(v, t.shape())).collect()
}

fn finite(step: u64, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("step {step}: {name} became {v}")))
    }
}

struct Nets<'a> {
    gen: &'a mut Generator<f32>,
    disc: &'a mut Discriminator<f32>,
    adam_g: &'a mut Adam<f32>,
    adam_d: &'a mut Adam<f32>,
}

fn step(nets: &mut Nets, batch: &[&Example], config: &GanConfig, with_constraint: bool, seed: u64, step: u64) -> Result<LossReport> {
    let input = batch_tensors(&batch.iter().map(|e| &e.input).collect::<Vec<_>>())?;
    let water = batch_tensors(&batch.iter().map(|e| &e.water).collect::<Vec<_>>())?;
    let target = batch_tensors(&batch.iter().map(|e| &e.target).collect::<Vec<_>>())?;

    let mut g = Graph::<f32>::new(Mode::Train, seed);
    let gp = bind(&mut g, nets.gen.params(), true);
    let x = g.constant(input);
    let w = g.constant(water);
    let y = g.constant(target);
    let fake = nets.gen.forward(&mut g, &gp, x)?;

    // Discriminator update on a detached copy of the generated batch.
    let dp = bind(&mut g, nets.disc.params(), true);
    let fake_detached = g.constant(g.value(fake).clone());
    let real_pair = g.concat(&[x, y])?;
    let fake_pair = g.concat(&[x, fake_detached])?;
    let (real_logits, _) = nets.disc.forward(&mut g, &dp, real_pair)?;
    let (fake_logits, _) = nets.disc.forward(&mut g, &dp, fake_pair)?;
    let d_loss = discriminator_loss(&mut g, real_logits, fake_logits)?;
    let d_value = finite(step, "L_cGAN_D", g.value(d_loss).item() as f64)?;
    let mut grads = g.backward(d_loss)?;
    let d_grads = gather(&mut grads, &dp, nets.disc.params());
    nets.adam_d.step(nets.disc.params_mut().tensors_mut(), &d_grads)?;

    // Generator update against the refreshed discriminator.
    let dp = bind(&mut g, nets.disc.params(), false);
    let pair = g.concat(&[x, fake])?;
    let (logits, _) = nets.disc.forward(&mut g, &dp, pair)?;
    let gl = generator_loss(&mut g, logits, y, fake, w, config.lambda, config.alpha, with_constraint)?;
    finite(step, "generator objective", g.value(gl.total).item() as f64)?;
    let mut grads = g.backward(gl.total)?;
    let g_grads = gather(&mut grads, &gp, nets.gen.params());
    nets.adam_g.step(nets.gen.params_mut().tensors_mut(), &g_grads)?;

    Ok(LossReport {
        step,
        epoch: 0,
        d_loss: d_value,
        g_adv: finite(step, "L_cGAN_G", g.value(gl.adversarial).item() as f64)?,
        l1: finite(step, "L_L1", g.value(gl.l1).item() as f64)?,
        constr: match gl.constraint {
            Some(c) => finite(step, "L_constr", g.value(c).item() as f64)?,
            None => 0.0,
        },
        overlap: hard_overlap(g.value(fake).data(), g.value(w).data()),
        wall_ms: 0,
    })
}

fn sha256_hex(s: &str) -> String {
    Sha256::digest(s.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Train on in-memory cities. Deterministic given `config.seed`.
pub fn train_on(stacks: &[CityStack], config: &GanConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let examples = prepare(stacks, config)?;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut root = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gen = Generator::<f32>::new(config, root.next_u64())?;
    let mut disc = Discriminator::<f32>::new(config, root.next_u64())?;
    let mut adam_g = new_adam(config, gen.params())?;
    let mut adam_d = new_adam(config, disc.params())?;

    let mut log_csv = format!("{LOG_HEADER}\n");
    let mut reports = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step_no = 0u64;

    let snapshot = |gen: &Generator<f32>,
                    disc: &Discriminator<f32>,
                    adam_g: &Adam<f32>,
                    adam_d: &Adam<f32>,
                    epoch: usize,
                    step: u64,
                    rng: &ChaCha8Rng,
                    log: &str| ModelCheckpoint {
        config: config.clone(),
        generator: gen.clone(),
        discriminator: disc.clone(),
        adam_g: adam_g.clone(),
        adam_d: adam_d.clone(),
        epoch,
        step,
        rng: RngState::capture(rng),
        log_sha256: sha256_hex(log),
    };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut root);
        let mut epoch_l1 = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            step_no += 1;
            let seed = root.next_u64();
            let started = Instant::now();
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut nets = Nets { gen: &mut gen, disc: &mut disc, adam_g: &mut adam_g, adam_d: &mut adam_d };
            let mut report = step(&mut nets, &batch, config, opts.include_constraint, seed, step_no)?;
            report.epoch = epoch;
            if opts.record_wall_time {
                report.wall_ms = started.elapsed().as_millis() as u64;
            }
            epoch_l1 += report.l1;
            batches += 1;
            writeln!(log_csv, "{}", report.csv_line()).expect("write to String");
            reports.push(report);
        }
        log::info!("epoch {epoch}/{}: mean L1 {:.5}", config.epochs, epoch_l1 / batches as f64);

        if let Some(dir) = &opts.out_dir {
            if opts.checkpoint_every > 0 && epoch % opts.checkpoint_every == 0 && epoch < config.epochs {
                let ckpt = snapshot(&gen, &disc, &adam_g, &adam_d, epoch, step_no, &root, &log_csv);
                save_checkpoint(&ckpt, dir.join(format!("checkpoint_epoch{epoch:03}.ckpt")))?;
                write_log(dir, &log_csv)?;
            }
        }
    }

    let checkpoint = snapshot(&gen, &disc, &adam_g, &adam_d, config.epochs, step_no, &root, &log_csv);
    if let Some(dir) = &opts.out_dir {
        write_log(dir, &log_csv)?;
        save_checkpoint(&checkpoint, dir.join(MODEL_NAME))?;
    }
    Ok(TrainOutcome { checkpoint, reports, log_csv })
}

fn write_log(dir: &Path, log: &str) -> Result<()> {
    let path = dir.join(LOG_NAME);
    fs::write(&path, log).map_err(|e| Error::io(&path, e))
}
