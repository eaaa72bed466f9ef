//! Central finite-difference oracle for the backward rules.
//!
//! Each checked coordinate costs two evaluations at `x ± h` with
//! `h = rel_step·(1+|x|)`, plus two traced evaluations at `x ± kink_factor·h`:
//! if any ReLU-family input changes sign between those two, the coordinate
//! sits next to a non-differentiable point and is skipped, not scored.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, Primitive, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub rel_step: f64,
    pub coords_per_tensor: usize,
    pub seed: u64,
    pub kink_factor: f64,
    /// Denominator floor of the relative error, so vanishing gradients are
    /// compared absolutely.
    pub denom_floor: f64,
    /// Evaluate in train mode with this dropout seed (same mask every call).
    pub train_seed: Option<u64>,
    pub fault: Option<Primitive>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            rel_step: 1e-5,
            coords_per_tensor: 64,
            seed: 0,
            kink_factor: 10.0,
            denom_floor: 1e-6,
            train_seed: None,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub samples: Vec<FdSample>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FdReport {
    pub tensors: Vec<TensorReport>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked() > 0 && self.max_rel_err() < tol
    }
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compare backprop gradients of the scalar built by `f` against central
/// differences, for every input tensor in `inputs`.
pub fn finite_diff_check<F>(f: F, inputs: &[(String, Tensor<f64>)], opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let new_graph = || match opts.train_seed {
        Some(seed) => Graph::new(Mode::Train, seed),
        None => Graph::eval(),
    };
    let eval = |values: &[Tensor<f64>], trace: bool| -> Result<(f64, Vec<i8>)> {
        let mut g = new_graph();
        if trace {
            g.enable_kink_trace();
        }
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g.value(loss).item(), g.kink_trace().map(<[i8]>::to_vec).unwrap_or_default()))
    };

    let mut g = new_graph();
    if let Some(p) = opts.fault {
        g.inject_fault(p);
    }
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = FdReport::default();
    for (k, (name, tensor)) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(tensor.shape());
        let analytic = grads.get(vars[k]).unwrap_or(&zeros);
        let n = tensor.numel();
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = index::sample(&mut rng, n, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut tr = TensorReport { name: name.clone(), checked: 0, skipped: 0, max_rel_err: 0.0, samples: Vec::new() };
        for idx in coords {
            let x0 = tensor.data()[idx];
            let h = opts.rel_step * (1.0 + x0.abs());

            values[k].data_mut()[idx] = x0 + opts.kink_factor * h;
            let (_, sig_hi) = eval(&values, true)?;
            values[k].data_mut()[idx] = x0 - opts.kink_factor * h;
            let (_, sig_lo) = eval(&values, true)?;
            let near_kink = sig_hi != sig_lo;

            values[k].data_mut()[idx] = x0 + h;
            let (fp, _) = eval(&values, false)?;
            values[k].data_mut()[idx] = x0 - h;
            let (fm, _) = eval(&values, false)?;
            values[k].data_mut()[idx] = x0;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[idx];
            let rel_err = relative_error(a, numeric, opts.denom_floor);
            if near_kink {
                tr.skipped += 1;
            } else {
                tr.checked += 1;
                tr.max_rel_err = tr.max_rel_err.max(rel_err);
            }
            tr.samples.push(FdSample { index: idx, analytic: a, numeric, rel_err, skipped: near_kink });
        }
        report.tensors.push(tr);
    }
    Ok(report)
}

/// Result of checking one primitive on randomized shapes.
#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub primitive: Primitive,
    pub shapes: Vec<Vec<usize>>,
    pub report: FdReport,
}

/// Every differentiable primitive, each checked on a randomly shaped
/// instance. Non-scalar outputs are contracted against a fixed random
/// tensor so every output coordinate contributes a distinct weight.
pub const SUITE_PRIMITIVES: [Primitive; 20] = [
    Primitive::Conv2d,
    Primitive::ConvTranspose2d,
    Primitive::LeakyRelu,
    Primitive::Relu,
    Primitive::Sigmoid,
    Primitive::Tanh,
    Primitive::Dropout,
    Primitive::Concat,
    Primitive::Add,
    Primitive::Sub,
    Primitive::Mul,
    Primitive::Scale,
    Primitive::Mean,
    Primitive::Sum,
    Primitive::Abs,
    Primitive::InstanceNorm,
    Primitive::BceWithLogits,
    Primitive::L1,
    Primitive::SelectChannel,
    Primitive::MatMul,
];

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    // Sum of uniforms: cheap, bounded, roughly normal.
    Tensor::from_fn(shape, |_| (0..4).map(|_| rng.gen::<f64>()).sum::<f64>() - 2.0)
}

fn contract(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub fn primitive_suite(seed: u64, opts: &FdOptions) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, &prim) in SUITE_PRIMITIVES.iter().enumerate() {
        // At least 2·6·6 = 72 entries, so each data tensor yields 64 draws.
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(2..=4);
        let h = rng.gen_range(6..=9);
        let w = rng.gen_range(6..=9);
        let x_shape = vec![n, c, h, w];
        let mut o = FdOptions { seed: opts.seed.wrapping_add(i as u64), ..*opts };

        let (inputs, weights): (Vec<Tensor<f64>>, Option<Tensor<f64>>) = match prim {
            Primitive::Conv2d => {
                let co = rng.gen_range(2..=4);
                let k = rng.gen_range(1..=3);
                let stride = rng.gen_range(1..=2);
                let pad = rng.gen_range(0..=1);
                let x = randn(&mut rng, &x_shape);
                let wt = randn(&mut rng, &[co, c, k, k]);
                let b = randn(&mut rng, &[co]);
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (w + 2 * pad - k) / stride + 1;
                let weights = randn(&mut rng, &[n, co, oh, ow]);
                let inputs = vec![x, wt, b];
                let f = move |g: &mut Graph<f64>, v: &[Var]| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    contract(g, y, &weights)
                };
                out.push(check(prim, f, inputs, &o)?);
                continue;
            }
            Primitive::ConvTranspose2d => {
                let co = rng.gen_range(2..=4);
                let stride = rng.gen_range(1..=2);
                let k = rng.gen_range(2..=4);
                let pad = if k > 2 { rng.gen_range(0..=1) } else { 0 };
                let x = randn(&mut rng, &x_shape);
                let wt = randn(&mut rng, &[c, co, k, k]);
                let b = randn(&mut rng, &[co]);
                let oh = (h - 1) * stride + k - 2 * pad;
                let ow = (w - 1) * stride + k - 2 * pad;
                let weights = randn(&mut rng, &[n, co, oh, ow]);
                let f = move |g: &mut Graph<f64>, v: &[Var]| {
                    let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    contract(g, y, &weights)
                };
                out.push(check(prim, f, vec![x, wt, b], &o)?);
                continue;
            }
            Primitive::Concat => {
                let c2 = rng.gen_range(1..=3);
                let a = randn(&mut rng, &x_shape);
                let b = randn(&mut rng, &[n, c2, h, w]);
                let weights = randn(&mut rng, &[n, c + c2, h, w]);
                let f = move |g: &mut Graph<f64>, v: &[Var]| {
                    let y = g.concat(&[v[0], v[1]])?;
                    contract(g, y, &weights)
                };
                out.push(check(prim, f, vec![a, b], &o)?);
                continue;
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::L1 => {
                (vec![randn(&mut rng, &x_shape), randn(&mut rng, &x_shape)], Some(randn(&mut rng, &x_shape)))
            }
            Primitive::SelectChannel => {
                let x = randn(&mut rng, &x_shape);
                let ch = rng.gen_range(0..c);
                let weights = randn(&mut rng, &[n, 1, h, w]);
                let f = move |g: &mut Graph<f64>, v: &[Var]| {
                    let y = g.select_channel(v[0], ch)?;
                    contract(g, y, &weights)
                };
                out.push(check(prim, f, vec![x], &o)?);
                continue;
            }
            Primitive::MatMul => {
                let (m, k, p) = (rng.gen_range(8..=12), rng.gen_range(8..=12), rng.gen_range(8..=12));
                let weights = randn(&mut rng, &[m, p]);
                let f = move |g: &mut Graph<f64>, v: &[Var]| {
                    let y = g.matmul(v[0], v[1])?;
                    contract(g, y, &weights)
                };
                out.push(check(prim, f, vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[k, p])], &o)?);
                continue;
            }
            Primitive::Dropout => {
                o.train_seed = Some(seed ^ 0x5eed);
                (vec![randn(&mut rng, &x_shape)], Some(randn(&mut rng, &x_shape)))
            }
            _ => (vec![randn(&mut rng, &x_shape)], Some(randn(&mut rng, &x_shape))),
        };
        let weights = weights.expect("pointwise primitives are contracted");
        let f = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let y = match prim {
                Primitive::LeakyRelu => g.leaky_relu(v[0])?,
                Primitive::Relu => g.relu(v[0])?,
                Primitive::Sigmoid => g.sigmoid(v[0])?,
                Primitive::Tanh => g.tanh(v[0])?,
                Primitive::Dropout => g.dropout(v[0], 0.3)?,
                Primitive::Add => g.add(v[0], v[1])?,
                Primitive::Sub => g.sub(v[0], v[1])?,
                Primitive::Mul => g.mul(v[0], v[1])?,
                Primitive::Scale => g.scale(v[0], -1.7)?,
                Primitive::Abs => g.abs(v[0])?,
                Primitive::InstanceNorm => g.instance_norm(v[0])?,
                Primitive::Mean => {
                    let y = g.mul(v[0], v[0])?;
                    return g.mean(y);
                }
                Primitive::Sum => {
                    let y = g.tanh(v[0])?;
                    return g.sum(y);
                }
                Primitive::BceWithLogits => return g.bce_with_logits(v[0], 0.7),
                Primitive::L1 => return g.l1(v[0], v[1]),
                other => unreachable!("{other} handled above"),
            };
            contract(g, y, &weights)
        };
        let shapes_in = inputs.clone();
        out.push(check(prim, f, shapes_in, &o)?);
    }
    Ok(out)
}

fn check<F>(primitive: Primitive, f: F, inputs: Vec<Tensor<f64>>, opts: &FdOptions) -> Result<PrimitiveCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let shapes = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let named: Vec<(String, Tensor<f64>)> =
        inputs.into_iter().enumerate().map(|(i, t)| (format!("{primitive}.in{i}"), t)).collect();
    let report = finite_diff_check(f, &named, opts)?;
    Ok(PrimitiveCheck { primitive, shapes, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = randn(&mut rng, &[4, 3]);
        let x = randn(&mut rng, &[3, 1]);
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.matmul(v[0], v[1])?;
            g.sum(y)
        };
        let r = finite_diff_check(f, &[("w".into(), w), ("x".into(), x)], &FdOptions::default()).unwrap();
        assert_eq!(r.checked(), 15);
        assert!(r.max_rel_err() < 1e-8, "{}", r.max_rel_err());
    }

    #[test]
    fn one_by_one_identity_conv_is_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[1, 2, 4, 4]);
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let weights = randn(&mut rng, &[1, 2, 4, 4]);
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], None, 1, 0)?;
            contract(g, y, &weights)
        };
        let r = finite_diff_check(f, &[("x".into(), x), ("w".into(), w)], &FdOptions::default()).unwrap();
        assert!(r.max_rel_err() < 1e-8, "{}", r.max_rel_err());
        // d/dx of an identity conv is the contraction weights themselves.
        for s in &r.tensors[0].samples {
            assert!((s.analytic - weights.data()[s.index]).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_at_kink_is_skipped() {
        let x = Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.relu(v[0])?;
            g.sum(y)
        };
        let r = finite_diff_check(f, &[("x".into(), x)], &FdOptions::default()).unwrap();
        let t = &r.tensors[0];
        assert_eq!((t.checked, t.skipped), (2, 1));
        assert!(t.samples[0].skipped);
        assert!(r.max_rel_err() < 1e-8);
    }

    #[test]
    fn suite_passes_and_fault_is_caught() {
        let opts = FdOptions::default();
        for check in primitive_suite(11, &opts).unwrap() {
            assert!(check.report.passes(1e-4), "{} {:?}", check.primitive, check.report.max_rel_err());
        }
        let bad = FdOptions { fault: Some(Primitive::Conv2d), ..opts };
        let checks = primitive_suite(11, &bad).unwrap();
        let conv = checks.iter().find(|c| c.primitive == Primitive::Conv2d).unwrap();
        assert!(!conv.report.passes(1e-4));
    }
}
