//! Fully connected embedding network with a linear classifier head.
//!
//! Hidden layers use ReLU, the embedding layer is linear, and the classifier
//! maps embeddings to logits. Forward and backward passes are explicit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub d_emb: usize,
    pub n_classes: usize,
}

impl NetworkShape {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_emb == 0 || self.n_classes == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid(format!("every layer width must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(in, out)` widths of the embedding stack.
    fn stack_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.d_in];
        widths.extend(&self.hidden);
        widths.push(self.d_emb);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Affine layer `y = x W^T + b`, with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(d_out, d_in),
            bias: vec![T::zero(); d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(x.rows(), self.d_out());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let o = out.row_mut(r);
            for (j, oj) in o.iter_mut().enumerate() {
                let w = self.weights.row(j);
                let mut acc = self.bias[j];
                for (&a, &b) in xr.iter().zip(w) {
                    acc += a * b;
                }
                *oj = acc;
            }
        }
        out
    }

    /// Accumulates `dW = delta^T x`, `db = sum delta` into `grad` and returns
    /// `delta W`, the gradient with respect to the layer input.
    fn backprop(&self, x: &Matrix<T>, delta: &Matrix<T>, grad: &mut Dense<T>) -> Matrix<T> {
        let mut dx = Matrix::zeros(x.rows(), self.d_in());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let dr = delta.row(r);
            for (j, &d) in dr.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                grad.bias[j] += d;
                let gw = grad.weights.row_mut(j);
                for (g, &a) in gw.iter_mut().zip(xr) {
                    *g += d * a;
                }
                let w = self.weights.row(j);
                for (o, &wv) in dx.row_mut(r).iter_mut().zip(w) {
                    *o += d * wv;
                }
            }
        }
        dx
    }
}

/// Parameters of the embedding stack plus classifier. Also used as the
/// container for parameter gradients and optimizer velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams<T> {
    pub layers: Vec<Dense<T>>,
    pub classifier: Dense<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn zeros(shape: &NetworkShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            layers: shape.stack_dims().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect(),
            classifier: Dense::zeros(shape.d_emb, shape.n_classes),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.d_in(), l.d_out())).collect(),
            classifier: Dense::zeros(self.classifier.d_in(), self.classifier.d_out()),
        }
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            d_in: self.layers.first().map_or(0, Dense::d_in),
            hidden: self.layers.iter().rev().skip(1).rev().map(Dense::d_out).collect(),
            d_emb: self.classifier.d_in(),
            n_classes: self.classifier.d_out(),
        }
    }

    /// Parameter tensors in a fixed order: each layer's weights then bias,
    /// then the classifier.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.layers.len() {
            names.push(format!("layer{i}.weights"));
            names.push(format!("layer{i}.bias"));
        }
        names.push("classifier.weights".into());
        names.push("classifier.bias".into());
        names
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        let a: Vec<usize> = self.tensors().iter().map(|t| t.len()).collect();
        let b: Vec<usize> = other.tensors().iter().map(|t| t.len()).collect();
        if a != b || self.shape() != other.shape() {
            return Err(Error::invalid("parameter sets have different shapes"));
        }
        Ok(())
    }
}

/// Gaussian `N(0, INIT_SIGMA^2)` weights, zero biases.
pub fn init_params<T: Scalar>(shape: &NetworkShape, seed: u64) -> Result<MlpParams<T>> {
    init_params_with_sigma(shape, seed, INIT_SIGMA)
}

pub fn init_params_with_sigma<T: Scalar>(shape: &NetworkShape, seed: u64, sigma: f64) -> Result<MlpParams<T>> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(format!("init sigma {sigma}: {e}")))?;
    let mut params = MlpParams::zeros(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in params.layers.iter_mut().chain(std::iter::once(&mut params.classifier)) {
        for w in layer.weights.as_mut_slice() {
            *w = T::lit(normal.sample(&mut rng));
        }
    }
    Ok(params)
}

/// Intermediate values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to each layer of the embedding stack.
    pub layer_inputs: Vec<Matrix<T>>,
    /// Pre-activation output of each layer of the embedding stack.
    pub pre_activations: Vec<Matrix<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub cache: ForwardCache<T>,
    pub embeddings: Matrix<T>,
    pub logits: Matrix<T>,
}

pub fn forward<T: Scalar>(params: &MlpParams<T>, inputs: &Matrix<T>) -> Result<ForwardPass<T>> {
    let d_in = params.layers.first().map_or(0, Dense::d_in);
    if inputs.cols() != d_in {
        return Err(Error::DimensionMismatch {
            expected: d_in,
            found: inputs.cols(),
        });
    }
    let last = params.layers.len() - 1;
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut x = inputs.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = layer.apply(&x);
        let next = if i < last {
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(T::zero()));
            a
        } else {
            z.clone()
        };
        layer_inputs.push(std::mem::replace(&mut x, next));
        pre_activations.push(z);
    }
    let logits = params.classifier.apply(&x);
    Ok(ForwardPass {
        cache: ForwardCache {
            layer_inputs,
            pre_activations,
        },
        embeddings: x,
        logits,
    })
}

/// Embeddings only.
pub fn embed<T: Scalar>(params: &MlpParams<T>, inputs: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(forward(params, inputs)?.embeddings)
}

/// Reverse-mode gradients of a loss whose partial derivatives with respect to
/// the embeddings and the logits are `dembeddings` and `dlogits`.
pub fn backward<T: Scalar>(
    params: &MlpParams<T>,
    cache: &ForwardCache<T>,
    dembeddings: &Matrix<T>,
    dlogits: &Matrix<T>,
) -> Result<MlpParams<T>> {
    let m = cache.layer_inputs.first().map_or(0, Matrix::rows);
    let shape = params.shape();
    if cache.layer_inputs.len() != params.layers.len() || cache.pre_activations.len() != params.layers.len() {
        return Err(Error::invalid("forward cache does not match the network depth"));
    }
    if dembeddings.shape() != (m, shape.d_emb) {
        return Err(Error::invalid(format!(
            "dembeddings shape {:?}, expected {:?}",
            dembeddings.shape(),
            (m, shape.d_emb)
        )));
    }
    if dlogits.shape() != (m, shape.n_classes) {
        return Err(Error::invalid(format!(
            "dlogits shape {:?}, expected {:?}",
            dlogits.shape(),
            (m, shape.n_classes)
        )));
    }

    let mut grads = params.zeros_like();
    let embeddings = cache.pre_activations.last().expect("non-empty stack");
    let from_logits = params.classifier.backprop(embeddings, dlogits, &mut grads.classifier);

    // total dL/demb = dembeddings + dlogits W
    let mut delta = dembeddings.clone();
    delta.add_scaled(&from_logits, T::one())?;

    for i in (0..params.layers.len()).rev() {
        let dx = params.layers[i].backprop(&cache.layer_inputs[i], &delta, &mut grads.layers[i]);
        if i == 0 {
            break;
        }
        let pre = &cache.pre_activations[i - 1];
        delta = dx;
        for (d, &z) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            if z <= T::zero() {
                *d = T::zero();
            }
        }
    }
    Ok(grads)
}

/// SGD with momentum and a step-halving learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub halve_every: u64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            halve_every: 20_000,
            momentum: 0.9,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("sgd base_lr must be > 0"));
        }
        if self.halve_every == 0 {
            return Err(Error::invalid("sgd halve_every must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("sgd momentum must be in [0, 1)"));
        }
        Ok(())
    }

    /// `base_lr * 0.5^floor(t / halve_every)`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let halvings = (iteration / self.halve_every).min(i32::MAX as u64) as i32;
        self.base_lr * 0.5f64.powi(halvings)
    }
}

/// Optimizer state. One instance per parameter set; not shared.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Option<MlpParams<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, velocity: None })
    }

    pub fn velocity(&self) -> Option<&MlpParams<T>> {
        self.velocity.as_ref()
    }

    /// `v <- momentum v - lr(t) g; p <- p + v`.
    pub fn step(&mut self, params: &mut MlpParams<T>, grads: &MlpParams<T>, iteration: u64) -> Result<()> {
        params.check_compatible(grads)?;
        let lr = T::lit(self.config.lr_at(iteration));
        let mu = T::lit(self.config.momentum);
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        let mut vs = velocity.tensors_mut();
        let gs = grads.tensors();
        for ((p, v), g) in params.tensors_mut().into_iter().zip(vs.iter_mut()).zip(gs) {
            for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi - lr * gi;
                *pi += *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn shape() -> NetworkShape {
        NetworkShape {
            d_in: 5,
            hidden: vec![7, 6],
            d_emb: 4,
            n_classes: 3,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a: MlpParams<f64> = init_params(&shape(), 9).unwrap();
        let b: MlpParams<f64> = init_params(&shape(), 9).unwrap();
        let c: MlpParams<f64> = init_params(&shape(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_sample_mean_is_centered() {
        let s = NetworkShape {
            d_in: 100,
            hidden: vec![],
            d_emb: 100,
            n_classes: 1,
        };
        let p: MlpParams<f64> = init_params(&s, 23).unwrap();
        let w = p.layers[0].weights.as_slice();
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * INIT_SIGMA / (w.len() as f64).sqrt(), "mean {mean}");
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() - INIT_SIGMA).abs() < 0.005);
    }

    #[test]
    fn invalid_shape() {
        let mut s = shape();
        s.hidden = vec![0];
        assert!(init_params::<f64>(&s, 1).is_err());
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let p = MlpParams::<f64>::zeros(&shape()).unwrap();
        let x = Matrix::from_vec(2, 5, (0..10).map(f64::from).collect()).unwrap();
        let f = forward(&p, &x).unwrap();
        assert!(f.embeddings.as_slice().iter().all(|&v| v == 0.0));
        assert!(f.logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_inputs_through() {
        let s = NetworkShape {
            d_in: 3,
            hidden: vec![],
            d_emb: 3,
            n_classes: 2,
        };
        let mut p = MlpParams::<f64>::zeros(&s).unwrap();
        for i in 0..3 {
            p.layers[0].weights.set(i, i, 1.0);
        }
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -7.0]).unwrap();
        assert_eq!(embed(&p, &x).unwrap(), x);
    }

    #[test]
    fn input_dimension_checked() {
        let p = MlpParams::<f64>::zeros(&shape()).unwrap();
        assert!(forward(&p, &Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn logits_match_direct_recomputation() {
        let p: MlpParams<f64> = init_params_with_sigma(&shape(), 4, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::from_vec(3, 5, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = forward(&p, &x).unwrap();
        for r in 0..3 {
            let mut h: Vec<f64> = x.row(r).to_vec();
            for (li, l) in p.layers.iter().enumerate() {
                let mut next = vec![0.0; l.d_out()];
                for j in 0..l.d_out() {
                    next[j] = l.bias[j] + (0..l.d_in()).map(|c| l.weights.get(j, c) * h[c]).sum::<f64>();
                    if li + 1 < p.layers.len() {
                        next[j] = next[j].max(0.0);
                    }
                }
                h = next;
            }
            for j in 0..3 {
                let z = p.classifier.bias[j] + (0..4).map(|c| p.classifier.weights.get(j, c) * h[c]).sum::<f64>();
                assert!((f.logits.get(r, j) - z).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p: MlpParams<f64> = init_params(&shape(), 1).unwrap();
        let x = Matrix::from_vec(2, 5, vec![0.3; 10]).unwrap();
        let f = forward(&p, &x).unwrap();
        let g = backward(&p, &f.cache, &Matrix::zeros(2, 4), &Matrix::zeros(2, 3)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(backward(&p, &f.cache, &Matrix::zeros(3, 4), &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn single_linear_layer_least_squares_gradient() {
        // L = 1/2 |xW^T + b - y|^2 summed over rows => dW = (pred - y)^T x
        let s = NetworkShape {
            d_in: 2,
            hidden: vec![],
            d_emb: 2,
            n_classes: 1,
        };
        let mut p = MlpParams::<f64>::zeros(&s).unwrap();
        p.layers[0].weights = Matrix::from_vec(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        p.layers[0].bias = vec![0.1, -0.2];
        let x = Matrix::from_vec(2, 2, vec![1.0, 0.0, 2.0, -1.0]).unwrap();
        let y = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let f = forward(&p, &x).unwrap();
        let mut resid = f.embeddings.clone();
        resid.add_scaled(&y, -1.0).unwrap();
        let g = backward(&p, &f.cache, &resid, &Matrix::zeros(2, 1)).unwrap();
        // pred row0 = [1.1, -1.2], row1 = [0.1, -2.7]; resid = [1.1,-2.2],[ -0.9,-3.7]
        let expect_w = [1.1 * 1.0 + -0.9 * 2.0, 1.1 * 0.0 + -0.9 * -1.0, -2.2 * 1.0 + -3.7 * 2.0, -2.2 * 0.0 + -3.7 * -1.0];
        for (a, e) in g.layers[0].weights.as_slice().iter().zip(expect_w) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        assert!((g.layers[0].bias[0] - 0.2).abs() < 1e-12);
        assert!((g.layers[0].bias[1] - -5.9).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule() {
        let c = SgdConfig::default();
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(19_999), 0.1);
        assert_eq!(c.lr_at(20_000), 0.05);
        assert!((c.lr_at(40_000) - 0.025).abs() < 1e-17);
        let mut prev = f64::INFINITY;
        for t in (0..200_000).step_by(997) {
            assert!(c.lr_at(t) <= prev);
            prev = c.lr_at(t);
        }
    }

    #[test]
    fn sgd_zero_gradient_without_momentum_is_noop() {
        let mut p: MlpParams<f64> = init_params(&shape(), 3).unwrap();
        let before = p.clone();
        let mut opt = Sgd::new(SgdConfig { momentum: 0.0, ..Default::default() }).unwrap();
        let zero = p.zeros_like();
        opt.step(&mut p, &zero, 0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_momentum_matches_scalar_recurrence() {
        let s = NetworkShape {
            d_in: 1,
            hidden: vec![],
            d_emb: 1,
            n_classes: 1,
        };
        let mut p = MlpParams::<f64>::zeros(&s).unwrap();
        p.layers[0].weights.set(0, 0, 1.0);
        let cfg = SgdConfig {
            base_lr: 0.1,
            halve_every: 2,
            momentum: 0.9,
        };
        let mut opt = Sgd::new(cfg).unwrap();
        let gs = [0.5, -0.25, 1.0];
        let (mut w, mut v) = (1.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            let mut grads = p.zeros_like();
            grads.layers[0].weights.set(0, 0, g);
            opt.step(&mut p, &grads, t as u64).unwrap();
            let lr = 0.1 * 0.5f64.powi((t / 2) as i32);
            v = 0.9 * v - lr * g;
            w += v;
        }
        assert_eq!(p.layers[0].weights.get(0, 0), w);
    }

    #[test]
    fn sgd_config_validation() {
        assert!(SgdConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { halve_every: 0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { base_lr: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn shape_round_trips() {
        let p = MlpParams::<f32>::zeros(&shape()).unwrap();
        assert_eq!(p.shape(), shape());
        assert_eq!(p.tensor_names().len(), p.tensors().len());
    }
}
