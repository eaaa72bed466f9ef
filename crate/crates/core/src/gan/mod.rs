//! Conditional GAN mapping socioeconomic factor maps (or a water mask alone)
//! to built-land density, trained with an extra penalty on built mass placed
//! over water.
//!
//! Generator: U-Net. Encoder level `i` has `base·2^min(i,3)` channels and
//! halves the resolution with a 4×4 stride-2 convolution; the decoder mirrors
//! it with transposed convolutions and skip concatenations, ending in a
//! sigmoid so every output pixel lies in `[0,1]`.
//!
//! Discriminator (PatchGAN), for input size `S` and base width `c`:
//!
//! | block | op                          | output            |
//! |-------|-----------------------------|-------------------|
//! | d1    | conv4 s2, LReLU             | `c × S/2 × S/2`   |
//! | d2    | conv4 s2, IN, LReLU         | `2c × S/4 × S/4`  |
//! | d3    | conv4 s2, IN, LReLU (φ)     | `4c × S/8 × S/8`  |
//! | out   | conv3 s1                    | `1 × S/8 × S/8`   |
//!
//! The feature vector φ is d3 averaged over space, so it has `4c` entries
//! (64 at the default width of 16). At 64 px the logit grid is 8×8.

mod checkpoint;
pub(crate) mod net;
mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::raster::{normalize_layers, CityStack, Grid, LayerId, DEFAULT_POP_MAX_CAP};

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint, CHECKPOINT_MAGIC};
pub use net::{Discriminator, Generator};
pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, RngState};
pub use train::{load_split, train, train_on, LossReport, TrainOptions, TrainOutcome, LOG_HEADER, LOG_NAME, MODEL_NAME};

/// Threshold above which a generated pixel counts as built.
pub const TAU_BIN: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Population, luminosity and water mask.
    Factors,
    /// Water mask only.
    WaterOnly,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Factors => 3,
            InputMode::WaterOnly => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Factors => "factors",
            InputMode::WaterOnly => "water_only",
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factors" => Ok(InputMode::Factors),
            "water_only" => Ok(InputMode::WaterOnly),
            other => Err(Error::Validation(format!("unknown input mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub size: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub input_mode: InputMode,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            size: 64,
            base_width: 16,
            depth: 4,
            dropout: 0.2,
            lambda: 100.0,
            alpha: 100.0,
            adam: AdamConfig::default(),
            batch_size: 1,
            epochs: 30,
            seed: 0,
            input_mode: InputMode::Factors,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0,1), got {}", self.dropout));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.depth < 2 || self.depth > 8 {
            return bad(format!("depth must lie in [2,8], got {}", self.depth));
        }
        if !self.size.is_multiple_of(1 << self.depth) || !self.size.is_multiple_of(8) || self.size == 0 {
            return bad(format!(
                "image size {} must be divisible by 2^depth = {} and by 8",
                self.size,
                1 << self.depth
            ));
        }
        if self.base_width == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("base width, batch size and epochs must be positive".into());
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.adam.lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam betas must lie in [0,1)".into());
        }
        Ok(())
    }

    /// Length of the discriminator feature vector φ.
    pub fn feature_dim(&self) -> usize {
        4 * self.base_width
    }

    /// Side of the discriminator's logit grid.
    pub fn logit_grid(&self) -> usize {
        self.size / 8
    }
}

/// Network inputs for one city, each with a leading batch axis of 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    /// `[1, C, H, W]`: `[pop, lum, water]` or `[water]`.
    pub input: Tensor<f32>,
    /// `[1, 1, H, W]`.
    pub water: Tensor<f32>,
    /// `[1, 1, H, W]` built map, when the stack carries one.
    pub target: Option<Tensor<f32>>,
}

/// Normalize factor layers if needed and pack them as network tensors.
pub fn model_inputs(stack: &CityStack, mode: InputMode) -> Result<ModelInputs> {
    let normalized;
    let stack = if mode == InputMode::Factors
        && (!stack.is_normalized(LayerId::Pop) || !stack.is_normalized(LayerId::Lum))
    {
        normalized = normalize_layers(stack, DEFAULT_POP_MAX_CAP)?;
        &normalized
    } else {
        stack
    };
    let water = stack.require(LayerId::Water)?;
    let (h, w) = (water.height(), water.width());
    let channels: Vec<&Grid> = match mode {
        InputMode::Factors => vec![stack.require(LayerId::Pop)?, stack.require(LayerId::Lum)?, water],
        InputMode::WaterOnly => vec![water],
    };
    let mut data = Vec::with_capacity(channels.len() * h * w);
    for g in &channels {
        data.extend_from_slice(g.data());
    }
    let plane = |g: &Grid| Tensor::new(&[1, 1, h, w], g.data().to_vec());
    Ok(ModelInputs {
        input: Tensor::new(&[1, channels.len(), h, w], data)?,
        water: plane(water)?,
        target: stack.layer(LayerId::Bld).map(plane).transpose()?,
    })
}

/// Concatenate `[1,C,H,W]` tensors along the batch axis.
pub fn batch_tensors<T: Real>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::Shape(format!("batch items must be [1,C,H,W], got {shape:?}")));
    }
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("batch item {:?} differs from {shape:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[items.len(), shape[1], shape[2], shape[3]], data)
}

/// Value of the water penalty and the hard overlap rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintValue {
    /// `α · mean(x̃ ⊙ W)`.
    pub loss: f64,
    /// Fraction of pixels with `x̃ > 0.5` and `W = 1`.
    pub overlap: f64,
}

pub fn constraint_penalty(generated: &[f32], water: &[f32], alpha: f64) -> Result<ConstraintValue> {
    if generated.len() != water.len() || generated.is_empty() {
        return Err(Error::Shape(format!("generated map has {} pixels, water mask {}", generated.len(), water.len())));
    }
    let n = generated.len() as f64;
    let soft: f64 = generated.iter().zip(water).map(|(&x, &w)| x as f64 * w as f64).sum();
    Ok(ConstraintValue { loss: alpha * soft / n, overlap: hard_overlap(generated, water) })
}

pub fn hard_overlap(generated: &[f32], water: &[f32]) -> f64 {
    let hits = generated.iter().zip(water).filter(|(&x, &w)| x > TAU_BIN && w == 1.0).count();
    hits as f64 / generated.len().max(1) as f64
}

/// Differentiable water penalty `α · mean(x̃ ⊙ W)`.
pub fn constraint_term<T: Real>(g: &mut Graph<T>, generated: Var, water: Var, alpha: f64) -> Result<Var> {
    let masked = g.mul(generated, water)?;
    let m = g.mean(masked)?;
    g.scale(m, alpha)
}

/// `½ (BCE(real → 1) + BCE(fake → 0))` over the patch grid.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let real = g.bce_with_logits(real_logits, 1.0)?;
    let fake = g.bce_with_logits(fake_logits, 0.0)?;
    let sum = g.add(real, fake)?;
    g.scale(sum, 0.5)
}

/// Graph handles for the generator objective.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: Var,
    pub l1: Var,
    /// Absent when the constraint module is switched off.
    pub constraint: Option<Var>,
}

/// `BCE(D(x̃) → 1) + λ·mean|x − x̃| (+ α·mean(x̃ ⊙ W))`.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<T: Real>(
    g: &mut Graph<T>,
    fake_logits: Var,
    target: Var,
    generated: Var,
    water: Var,
    lambda: f64,
    alpha: f64,
    with_constraint: bool,
) -> Result<GeneratorLoss> {
    let adversarial = g.bce_with_logits(fake_logits, 1.0)?;
    let l1 = g.l1(generated, target)?;
    let weighted = g.scale(l1, lambda)?;
    let mut total = g.add(adversarial, weighted)?;
    let constraint = if with_constraint {
        let c = constraint_term(g, generated, water, alpha)?;
        total = g.add(total, c)?;
        Some(c)
    } else {
        None
    };
    Ok(GeneratorLoss { total, adversarial, l1, constraint })
}

/// How dropout behaves at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Dropout off: a pure function of the input.
    Deterministic,
    /// Dropout on with masks drawn from this seed.
    Seeded(u64),
}

fn check_mode(ckpt: &ModelCheckpoint, mode: InputMode) -> Result<()> {
    if ckpt.config.input_mode != mode {
        return Err(Error::Validation(format!(
            "mode mismatch: checkpoint was trained on {} input, got {}",
            ckpt.config.input_mode.as_str(),
            mode.as_str()
        )));
    }
    Ok(())
}

fn check_size(ckpt: &ModelCheckpoint, stack: &CityStack) -> Result<()> {
    let size = ckpt.config.size;
    if stack.width() != size || stack.height() != size {
        return Err(Error::Shape(format!(
            "checkpoint expects {size}x{size} tiles, got {}x{}",
            stack.width(),
            stack.height()
        )));
    }
    Ok(())
}

/// Predict a built map for one city.
pub fn generate(ckpt: &ModelCheckpoint, stack: &CityStack, mode: InputMode, sampling: Sampling) -> Result<Grid> {
    check_mode(ckpt, mode)?;
    check_size(ckpt, stack)?;
    let inputs = model_inputs(stack, mode)?;
    let gen = ckpt.generator();
    let mut g = match sampling {
        Sampling::Deterministic => Graph::<f32>::eval(),
        Sampling::Seeded(seed) => Graph::new(crate::autodiff::Mode::Train, seed),
    };
    let params = net::bind(&mut g, gen.params(), false);
    let x = g.constant(inputs.input);
    let out = gen.forward(&mut g, &params, x)?;
    let size = ckpt.config.size;
    Grid::new(size, size, g.value(out).data().to_vec())
}

/// One sample per seed.
pub fn generate_samples(ckpt: &ModelCheckpoint, stack: &CityStack, mode: InputMode, seeds: &[u64]) -> Result<Vec<Grid>> {
    seeds.iter().map(|&s| generate(ckpt, stack, mode, Sampling::Seeded(s))).collect()
}

/// Spatially averaged discriminator bottleneck for the city's real built map.
pub fn extract_features(ckpt: &ModelCheckpoint, stack: &CityStack) -> Result<Vec<f32>> {
    check_size(ckpt, stack)?;
    let inputs = model_inputs(stack, ckpt.config.input_mode)?;
    let target = inputs
        .target
        .ok_or_else(|| Error::Validation(format!("city {} has no built layer", stack.city_id())))?;
    let disc = ckpt.discriminator();
    let mut g = Graph::<f32>::eval();
    let params = net::bind(&mut g, disc.params(), false);
    let x = g.constant(inputs.input);
    let y = g.constant(target);
    let pair = g.concat(&[x, y])?;
    let (_, bottleneck) = disc.forward(&mut g, &params, pair)?;
    Ok(net::spatial_mean(g.value(bottleneck)))
}

/// Held-out evaluation of a checkpoint in deterministic mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub cities: usize,
    pub mean_overlap: f64,
    pub mean_l1: f64,
    /// Mean `|x_B − 0|`, the all-zeros baseline.
    pub mean_l1_zero: f64,
    pub a_real: Vec<f64>,
    pub a_generated: Vec<f64>,
}

pub fn evaluate(ckpt: &ModelCheckpoint, stacks: &[CityStack]) -> Result<EvalSummary> {
    let mut s = EvalSummary {
        cities: stacks.len(),
        mean_overlap: 0.0,
        mean_l1: 0.0,
        mean_l1_zero: 0.0,
        a_real: Vec::new(),
        a_generated: Vec::new(),
    };
    if stacks.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    for stack in stacks {
        let pred = generate(ckpt, stack, ckpt.config.input_mode, Sampling::Deterministic)?;
        let real = stack.require(LayerId::Bld)?;
        let water = stack.require(LayerId::Water)?;
        let n = real.data().len() as f64;
        s.mean_overlap += hard_overlap(pred.data(), water.data());
        s.mean_l1 += pred.data().iter().zip(real.data()).map(|(&p, &r)| (p - r).abs() as f64).sum::<f64>() / n;
        let a_real = real.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        s.mean_l1_zero += a_real;
        s.a_real.push(a_real);
        s.a_generated.push(pred.data().iter().map(|&v| v as f64).sum::<f64>() / n);
    }
    let k = stacks.len() as f64;
    s.mean_overlap /= k;
    s.mean_l1 /= k;
    s.mean_l1_zero /= k;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;

    #[test]
    fn constraint_examples() {
        let v = constraint_penalty(&[1.0; 16], &[1.0; 16], 100.0).unwrap();
        assert_eq!((v.loss, v.overlap), (100.0, 1.0));
        let v = constraint_penalty(&[0.9, 0.3, 1.0, 0.7], &[0.0; 4], 100.0).unwrap();
        assert_eq!((v.loss, v.overlap), (0.0, 0.0));
        // 100 · 0.5 / 4; 0.5 is not strictly above the binarization threshold.
        let v = constraint_penalty(&[0.5, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], 100.0).unwrap();
        assert_eq!((v.loss, v.overlap), (12.5, 0.0));
        assert!(constraint_penalty(&[0.0; 3], &[0.0; 4], 1.0).is_err());
    }

    #[test]
    fn constraint_gradient_is_alpha_w_over_n() {
        let water = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let mut g = Graph::<f64>::new(Mode::Eval, 0);
        let x = g.param(Tensor::from_fn(&[1, 1, 2, 3], |i| 0.1 * i as f64));
        let w = g.constant(Tensor::new(&[1, 1, 2, 3], water.to_vec()).unwrap());
        let loss = constraint_term(&mut g, x, w, 100.0).unwrap();
        let grads = g.backward(loss).unwrap();
        for (gv, wv) in grads.get(x).unwrap().data().iter().zip(water) {
            assert!((gv - 100.0 * wv / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_logits_give_ln2() {
        let mut g = Graph::<f64>::eval();
        let real = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let fake = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let d = discriminator_loss(&mut g, real, fake).unwrap();
        assert!((g.value(d).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let t = g.constant(Tensor::full(&[1, 1, 4, 4], 0.3));
        let w = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let x = g.constant(Tensor::full(&[1, 1, 4, 4], 0.3));
        let gl = generator_loss(&mut g, fake, t, x, w, 0.0, 0.0, true).unwrap();
        assert!((g.value(gl.adversarial).item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g.value(gl.l1).item(), 0.0);
        // λ = α = 0 leaves the bare adversarial term.
        assert_eq!(g.value(gl.total).item(), g.value(gl.adversarial).item());
    }

    #[test]
    fn config_validation() {
        assert!(GanConfig::default().validate().is_ok());
        for bad in [
            GanConfig { dropout: 1.0, ..Default::default() },
            GanConfig { alpha: -1.0, ..Default::default() },
            GanConfig { lambda: -0.1, ..Default::default() },
            GanConfig { depth: 1, ..Default::default() },
            GanConfig { size: 48, depth: 5, ..Default::default() },
            GanConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn batching_checks_shapes() {
        let a = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let b = Tensor::<f32>::full(&[1, 3, 4, 4], 1.0);
        let t = batch_tensors(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4, 4]);
        assert_eq!(t.data()[48], 1.0);
        assert!(batch_tensors(&[&a, &Tensor::zeros(&[1, 3, 4, 5])]).is_err());
    }
}
