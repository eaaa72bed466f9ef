use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::GanConfig;
use crate::autodiff::{Graph, ParamSet, Real, Tensor, Var};
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

/// Indices of one layer's weight and optional bias inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    w: usize,
    b: Option<usize>,
}

struct Builder<T> {
    params: ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn new(seed: u64) -> Self {
        Builder { params: ParamSet::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn layer(&mut self, name: &str, shape: [usize; 4], bias: Option<usize>) -> Layer {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::lit(normal.sample(&mut self.rng))).collect();
        let w = self.params.push(format!("{name}.w"), Tensor::new(&shape, data).expect("sized"));
        let b = bias.map(|c| self.params.push(format!("{name}.b"), Tensor::zeros(&[c])));
        Layer { w, b }
    }
}

/// Insert every tensor of `params` into `g`, as trainable leaves or constants.
pub(crate) fn bind<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> Vec<Var> {
    params
        .tensors()
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect()
}

/// Per-channel mean over space of a `[1,C,H,W]` tensor.
pub(crate) fn spatial_mean<T: Real>(t: &Tensor<T>) -> Vec<f32> {
    let s = t.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    (0..c)
        .map(|k| {
            let chunk = &t.data()[k * plane..(k + 1) * plane];
            (chunk.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64) as f32
        })
        .collect()
}

fn adopt<T: Real>(template: ParamSet<T>, params: ParamSet<T>, what: &str) -> Result<ParamSet<T>> {
    if template.names() != params.names() {
        return Err(Error::Shape(format!("{what} parameter names do not match the configured architecture")));
    }
    for ((name, a), b) in template.iter().zip(params.tensors()) {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("{what} parameter {name}: expected {:?}, got {:?}", a.shape(), b.shape())));
        }
    }
    Ok(params)
}

/// Map `[0,1]` inputs to `[-1,1]` inside the graph, so gradients with
/// respect to the caller's tensors keep their original units.
fn centre<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let doubled = g.scale(x, 2.0)?;
    let shift = g.constant(Tensor::full(&shape, -T::one()));
    g.add(doubled, shift)
}

fn width(base: usize, level: usize) -> usize {
    base << level.min(3)
}

/// U-Net generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    params: ParamSet<T>,
    enc: Vec<Layer>,
    dec: Vec<Layer>,
    dropout: f64,
}

impl<T: Real> Generator<T> {
    pub fn new(config: &GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, c) = (config.depth, config.base_width);
        let mut b = Builder::new(seed);
        let mut enc = Vec::with_capacity(d);
        for i in 0..d {
            let cin = if i == 0 { config.input_mode.channels() } else { width(c, i - 1) };
            let bias = (i == 0 || i == d - 1).then_some(width(c, i));
            enc.push(b.layer(&format!("enc{i}"), [width(c, i), cin, 4, 4], bias));
        }
        // Decoder block i maps level i+1 back to level i; built innermost first.
        let mut dec = vec![Layer { w: 0, b: None }; d];
        for i in (0..d).rev() {
            let cin = if i == d - 1 { width(c, d - 1) } else { 2 * width(c, i) };
            let cout = if i == 0 { 1 } else { width(c, i - 1) };
            dec[i] = b.layer(&format!("dec{i}"), [cin, cout, 4, 4], (i == 0).then_some(1));
        }
        Ok(Generator { params: b.params, enc, dec, dropout: config.dropout })
    }

    /// Architecture from `config` with the given parameter values.
    pub fn from_params(config: &GanConfig, params: ParamSet<T>) -> Result<Self> {
        let mut gen = Self::new(config, 0)?;
        gen.params = adopt(gen.params, params, "generator")?;
        Ok(gen)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Same architecture at another precision.
    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator { params: self.params.cast(), enc: self.enc.clone(), dec: self.dec.clone(), dropout: self.dropout }
    }

    /// `x: [N, C_in, S, S]` in `[0,1]` → `[N, 1, S, S]` in `[0,1]`. `p` comes from [`bind`].
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let conv = |g: &mut Graph<T>, l: Layer, x: Var| g.conv2d(x, p[l.w], l.b.map(|b| p[b]), 2, 1);
        let deconv = |g: &mut Graph<T>, l: Layer, x: Var| g.conv_transpose2d(x, p[l.w], l.b.map(|b| p[b]), 2, 1);
        let d = self.enc.len();

        let mut skips = Vec::with_capacity(d);
        let x = centre(g, x)?;
        let mut h = conv(g, self.enc[0], x)?;
        skips.push(h);
        for i in 1..d {
            let a = g.leaky_relu(h)?;
            h = conv(g, self.enc[i], a)?;
            if i < d - 1 {
                h = g.instance_norm(h)?;
            }
            skips.push(h);
        }

        for i in (1..d).rev() {
            let a = g.relu(h)?;
            let up = deconv(g, self.dec[i], a)?;
            let up = g.instance_norm(up)?;
            let up = g.dropout(up, self.dropout)?;
            h = g.concat(&[up, skips[i - 1]])?;
        }
        let a = g.relu(h)?;
        let out = deconv(g, self.dec[0], a)?;
        g.sigmoid(out)
    }
}

/// PatchGAN discriminator over `concat(x_A, x_W, x_B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    params: ParamSet<T>,
    layers: [Layer; 4],
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: &GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.base_width;
        let cin = config.input_mode.channels() + 1;
        let mut b = Builder::new(seed);
        let layers = [
            b.layer("d1", [c, cin, 4, 4], Some(c)),
            b.layer("d2", [2 * c, c, 4, 4], None),
            b.layer("d3", [4 * c, 2 * c, 4, 4], None),
            b.layer("out", [1, 4 * c, 3, 3], Some(1)),
        ];
        Ok(Discriminator { params: b.params, layers })
    }

    pub fn from_params(config: &GanConfig, params: ParamSet<T>) -> Result<Self> {
        let mut disc = Self::new(config, 0)?;
        disc.params = adopt(disc.params, params, "discriminator")?;
        Ok(disc)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Returns `(logits [N,1,S/8,S/8], bottleneck [N,4c,S/8,S/8])`.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], pair: Var) -> Result<(Var, Var)> {
        let [l1, l2, l3, lo] = self.layers;
        let conv = |g: &mut Graph<T>, l: Layer, x: Var, k_stride: usize, pad: usize| {
            g.conv2d(x, p[l.w], l.b.map(|b| p[b]), k_stride, pad)
        };
        let pair = centre(g, pair)?;
        let h = conv(g, l1, pair, 2, 1)?;
        let h = g.leaky_relu(h)?;
        let h = conv(g, l2, h, 2, 1)?;
        let h = g.instance_norm(h)?;
        let h = g.leaky_relu(h)?;
        let h = conv(g, l3, h, 2, 1)?;
        let h = g.instance_norm(h)?;
        let phi = g.leaky_relu(h)?;
        let logits = conv(g, lo, phi, 1, 1)?;
        Ok((logits, phi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::gan::InputMode;

    fn input(n: usize, c: usize, s: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, c, s, s], |i| ((i * 37) % 101) as f32 / 101.0)
    }

    #[test]
    fn generator_shapes_and_range() {
        let cfg = GanConfig::default();
        let gen = Generator::<f32>::new(&cfg, 1).unwrap();
        let mut g = Graph::eval();
        let p = bind(&mut g, gen.params(), false);
        let x = g.constant(input(2, 3, 64));
        let y = gen.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1, 64, 64]);
        assert!(g.value(y).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn eval_is_deterministic_and_dropout_adds_noise() {
        let cfg = GanConfig::default();
        let gen = Generator::<f32>::new(&cfg, 1).unwrap();
        let run = |mode: Mode, seed: u64| {
            let mut g = Graph::new(mode, seed);
            let p = bind(&mut g, gen.params(), false);
            let x = g.constant(input(1, 3, 64));
            let y = gen.forward(&mut g, &p, x).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
        assert_ne!(run(Mode::Train, 1), run(Mode::Train, 2));
    }

    #[test]
    fn discriminator_grid_and_bottleneck() {
        let cfg = GanConfig::default();
        let disc = Discriminator::<f32>::new(&cfg, 2).unwrap();
        let mut g = Graph::eval();
        let p = bind(&mut g, disc.params(), false);
        let x = g.constant(input(1, 4, 64));
        let (logits, phi) = disc.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(logits).shape(), &[1, 1, 8, 8]);
        assert_eq!(g.value(phi).shape(), &[1, 64, 8, 8]);
        assert_eq!(spatial_mean(g.value(phi)).len(), cfg.feature_dim());
        let again = disc.forward(&mut g, &p, x).unwrap().0;
        assert_eq!(g.value(logits), g.value(again));
    }

    #[test]
    fn water_only_has_one_input_channel() {
        let cfg = GanConfig { input_mode: InputMode::WaterOnly, ..Default::default() };
        let gen = Generator::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(gen.params().get("enc0.w").unwrap().shape(), &[16, 1, 4, 4]);
        let disc = Discriminator::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(disc.params().get("d1.w").unwrap().shape(), &[16, 2, 4, 4]);
    }

    #[test]
    fn from_params_rejects_foreign_layouts() {
        let cfg = GanConfig::default();
        let other = Generator::<f32>::new(&GanConfig { depth: 3, ..cfg.clone() }, 0).unwrap();
        assert!(Generator::from_params(&cfg, other.into_params()).is_err());
        let same = Generator::<f32>::new(&cfg, 5).unwrap();
        let rebuilt = Generator::from_params(&cfg, same.params().clone()).unwrap();
        assert_eq!(rebuilt, same);
    }

    #[test]
    fn bad_sizes_are_rejected() {
        assert!(Generator::<f32>::new(&GanConfig { size: 40, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn whole_networks_pass_finite_differences() {
        use crate::autodiff::{finite_diff_check, FdOptions};
        let cfg = GanConfig { size: 16, base_width: 2, depth: 2, ..Default::default() };
        let gen = Generator::<f64>::new(&cfg, 3).unwrap();
        let disc = Discriminator::<f64>::new(&cfg, 4).unwrap();
        let x = Tensor::from_fn(&[1, 3, 16, 16], |i| ((i * 53) % 97) as f64 / 97.0);
        let weights = Tensor::from_fn(&[1, 1, 16, 16], |i| ((i * 29) % 31) as f64 / 31.0 - 0.5);
        let mut inputs: Vec<(String, Tensor<f64>)> = vec![("x".into(), x)];
        inputs.extend(gen.params().iter().map(|(n, t)| (format!("g.{n}"), t.clone())));
        inputs.extend(disc.params().iter().map(|(n, t)| (format!("d.{n}"), t.clone())));
        let ng = gen.params().len();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let out = gen.forward(g, &v[1..1 + ng], v[0])?;
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w)?;
            let s = g.sum(prod)?;
            let pair = g.concat(&[v[0], out])?;
            let (logits, _) = disc.forward(g, &v[1 + ng..], pair)?;
            let adv = g.bce_with_logits(logits, 1.0)?;
            g.add(s, adv)
        };
        let report = finite_diff_check(f, &inputs, &FdOptions { coords_per_tensor: 16, ..Default::default() }).unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err());
    }
}
