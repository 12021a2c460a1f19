//! Compact U-Net with hand-written backpropagation.
//!
//! Topology for depth `d` and base width `b` (level `l` has `b * 2^l`
//! channels):
//!
//! * encoder level `l`: conv → ReLU → conv → ReLU → dropout, kept as the skip
//!   tensor, then 2×2 max-pool;
//! * bottleneck: the same block at `b * 2^d` channels;
//! * decoder level `l`: nearest-neighbour ×2 upsample → conv → ReLU, concat
//!   with the skip tensor, then conv → ReLU → conv → ReLU → dropout;
//! * head: 1×1 conv to a single logit channel.
//!
//! All convolutions are stride 1 with zero "same" padding. The code is
//! generic over [`Real`] so that gradient checks can run in `f64` through
//! the same path that trains in `f32`.

mod adam;
mod checkpoint;
mod ftz;
mod layers;
mod loss;
mod train;
mod unet;

use std::fmt::Debug;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{load_weights, load_weights_for, read_weights, save_weights, write_weights};
pub use loss::{bce_scalar, bce_with_logits, pixel_accuracy, sigmoid};
pub use train::{evaluate_loss, finetune, train, train_with, EpochRecord, TrainConfig, TrainReport};
pub use unet::{backward, forward, forward_raw, loss_and_gradients, objective, BatchGrad};

/// Floating-point element type of the network.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    /// `c = op(a) * op(b) + beta * c` with row-major operands.
    ///
    /// `op(a)` is `m x k`, `op(b)` is `k x n`. With `a_t`, `a` is stored as
    /// `k x m`; with `b_t`, `b` is stored as `n x k`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool);

    fn from_f64(v: f64) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the bounds above cover every element the strides reach.
                unsafe {
                    $kernel(
                        m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UNetConfig {
    pub input_size: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
    pub kernel_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_size: 128,
            depth: 3,
            base_channels: 16,
            dropout_rate: 0.15,
            kernel_size: 3,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Validation("U-Net depth must be at least 1".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << self.depth) {
            return Err(Error::Validation(format!(
                "input size {} not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Validation("base channel count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation(format!(
                "dropout rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every convolution in forward order.
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let k = self.kernel_size;
        let c = |l| self.channels(l);
        let mut specs = Vec::new();
        for l in 0..self.depth {
            let cin = if l == 0 { 1 } else { c(l - 1) };
            specs.push(ConvSpec::new(format!("enc{l}.conv1"), cin, c(l), k));
            specs.push(ConvSpec::new(format!("enc{l}.conv2"), c(l), c(l), k));
        }
        let d = self.depth;
        specs.push(ConvSpec::new("mid.conv1".into(), c(d - 1), c(d), k));
        specs.push(ConvSpec::new("mid.conv2".into(), c(d), c(d), k));
        for l in (0..d).rev() {
            specs.push(ConvSpec::new(format!("dec{l}.up"), c(l + 1), c(l), k));
            specs.push(ConvSpec::new(format!("dec{l}.conv1"), 2 * c(l), c(l), k));
            specs.push(ConvSpec::new(format!("dec{l}.conv2"), c(l), c(l), k));
        }
        specs.push(ConvSpec::new("head".into(), c(0), 1, 1));
        specs
    }

    /// `(name, dims)` of every parameter tensor: kernel then bias per conv.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.conv_specs()
            .into_iter()
            .flat_map(|s| {
                [
                    (format!("{}.w", s.name), vec![s.cout, s.cin, s.k, s.k]),
                    (format!("{}.b", s.name), vec![s.cout]),
                ]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvSpec {
    fn new(name: String, cin: usize, cout: usize, k: usize) -> Self {
        ConvSpec { name, cin, cout, k }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            name: name.into(),
            dims,
            data: vec![T::zero(); n],
        }
    }

    /// Convolution kernels carry the L2 penalty; biases do not.
    pub fn is_kernel(&self) -> bool {
        self.dims.len() == 4
    }
}

/// Ordered parameter tensors of a U-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Weights<T> {
    pub fn zeros(config: &UNetConfig) -> Self {
        Weights {
            tensors: config
                .tensor_layout()
                .into_iter()
                .map(|(n, d)| Tensor::zeros(n, d))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN))).collect(),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Euclidean norm of the convolution kernels.
    pub fn kernel_l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|t| t.is_kernel())
            .flat_map(|t| t.data.iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Checks names and shapes against `config`, naming the first mismatch.
    pub fn check_layout(&self, config: &UNetConfig) -> Result<()> {
        let layout = config.tensor_layout();
        for (i, (name, dims)) in layout.iter().enumerate() {
            let Some(t) = self.tensors.get(i) else {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    detail: format!("missing; weights hold only {} tensors", self.tensors.len()),
                });
            };
            if &t.name != name || &t.dims != dims {
                return Err(Error::ShapeMismatch {
                    name: t.name.clone(),
                    detail: format!(
                        "found {:?} at position {i}, expected `{name}` {:?}",
                        t.dims, dims
                    ),
                });
            }
            if t.data.len() != dims.iter().product::<usize>() {
                return Err(Error::ShapeMismatch {
                    name: t.name.clone(),
                    detail: format!("holds {} values for dims {:?}", t.data.len(), dims),
                });
            }
        }
        if self.tensors.len() > layout.len() {
            return Err(Error::ShapeMismatch {
                name: self.tensors[layout.len()].name.clone(),
                detail: format!("unexpected; configuration has {} tensors", layout.len()),
            });
        }
        Ok(())
    }
}

/// He-normal kernels (`std = sqrt(2 / fan_in)`) and zero biases.
pub fn init(config: &UNetConfig, seed: u64) -> Result<Weights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::<f32>::zeros(config);
    for t in w.tensors.iter_mut().filter(|t| t.is_kernel()) {
        let fan_in = (t.dims[1] * t.dims[2] * t.dims[3]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for v in t.data.iter_mut() {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    Ok(w)
}
