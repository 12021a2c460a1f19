use super::layers::{
    apply_mask, concat, conv_backward, conv_forward, dropout_mask, maxpool_backward, maxpool_forward,
    relu_backward, relu_inplace, split, upsample_backward, upsample_forward, Act,
};
use super::loss::{bce_scalar, sigmoid};
use super::ftz::FlushDenormals;
use super::{ConvSpec, Real, Tensor, UNetConfig, Weights};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::mix_seed;

/// Two conv+ReLU layers followed by optional dropout.
struct BlockRec<T> {
    x: Act<T>,
    r1: Act<T>,
    r2: Act<T>,
    mask: Option<Vec<T>>,
}

struct DecRec<T> {
    up_in: Act<T>,
    up_out: Act<T>,
    block: BlockRec<T>,
}

struct Trace<T> {
    enc: Vec<(BlockRec<T>, Vec<u32>)>,
    mid: BlockRec<T>,
    /// Decoder levels in forward order (deepest first).
    dec: Vec<DecRec<T>>,
    head_in: Act<T>,
    logits: Act<T>,
}

struct Net<'a, T> {
    weights: &'a Weights<T>,
    specs: Vec<ConvSpec>,
    config: &'a UNetConfig,
    /// `(rate, per-sample seed)` when dropout is active.
    dropout: Option<(f64, u64)>,
}

impl<'a, T: Real> Net<'a, T> {
    fn new(weights: &'a Weights<T>, config: &'a UNetConfig, dropout: Option<(f64, u64)>) -> Result<Self> {
        config.validate()?;
        weights.check_layout(config)?;
        Ok(Net {
            weights,
            specs: config.conv_specs(),
            config,
            dropout: dropout.filter(|(rate, _)| *rate > 0.0),
        })
    }

    fn conv(&self, i: usize, x: &Act<T>) -> Act<T> {
        let s = &self.specs[i];
        conv_forward(
            x,
            &self.weights.tensors[2 * i].data,
            &self.weights.tensors[2 * i + 1].data,
            s.cout,
            s.k,
        )
    }

    fn conv_back(&self, i: usize, x: &Act<T>, dy: &Act<T>, grads: &mut [Vec<T>], need_dx: bool) -> Option<Act<T>> {
        let (dw, rest) = grads[2 * i..].split_at_mut(1);
        conv_backward(
            x,
            &self.weights.tensors[2 * i].data,
            dy,
            self.specs[i].k,
            &mut dw[0],
            &mut rest[0],
            need_dx,
        )
    }

    fn block(&self, first_conv: usize, slot: usize, x: Act<T>) -> (Act<T>, BlockRec<T>) {
        let mut r1 = self.conv(first_conv, &x);
        relu_inplace(&mut r1);
        let mut r2 = self.conv(first_conv + 1, &r1);
        relu_inplace(&mut r2);
        let mut out = r2.clone();
        let mask = self.dropout.map(|(rate, seed)| {
            let m = dropout_mask(out.data.len(), rate, mix_seed(seed, &[slot as u64]));
            apply_mask(&mut out, &m);
            m
        });
        (out, BlockRec { x, r1, r2, mask })
    }

    fn block_back(&self, first_conv: usize, rec: &BlockRec<T>, mut dy: Act<T>, grads: &mut [Vec<T>], need_dx: bool) -> Option<Act<T>> {
        if let Some(m) = &rec.mask {
            apply_mask(&mut dy, m);
        }
        relu_backward(&rec.r2, &mut dy);
        let mut d1 = self
            .conv_back(first_conv + 1, &rec.r1, &dy, grads, true)
            .expect("dx requested");
        relu_backward(&rec.r1, &mut d1);
        self.conv_back(first_conv, &rec.x, &d1, grads, need_dx)
    }

    fn mid_conv(&self) -> usize {
        2 * self.config.depth
    }

    /// First conv index of the decoder stage run `j`-th (deepest is 0).
    fn dec_conv(&self, j: usize) -> usize {
        2 * self.config.depth + 2 + 3 * j
    }

    fn head_conv(&self) -> usize {
        5 * self.config.depth + 2
    }

    fn forward(&self, input: &[T]) -> Trace<T> {
        let d = self.config.depth;
        let s = self.config.input_size;
        let mut cur = Act {
            c: 1,
            h: s,
            w: s,
            data: input.to_vec(),
        };
        let mut enc = Vec::with_capacity(d);
        let mut skips = Vec::with_capacity(d);
        for l in 0..d {
            let (out, rec) = self.block(2 * l, l, cur);
            let (pooled, arg) = maxpool_forward(&out);
            skips.push(out);
            enc.push((rec, arg));
            cur = pooled;
        }
        let (out, mid) = self.block(self.mid_conv(), d, cur);
        cur = out;
        let mut dec = Vec::with_capacity(d);
        for j in 0..d {
            let l = d - 1 - j;
            let first = self.dec_conv(j);
            let up_in = upsample_forward(&cur);
            let mut up_out = self.conv(first, &up_in);
            relu_inplace(&mut up_out);
            let cat = concat(&up_out, &skips[l]);
            let (out, block) = self.block(first + 1, d + 1 + j, cat);
            dec.push(DecRec {
                up_in,
                up_out,
                block,
            });
            cur = out;
        }
        let logits = self.conv(self.head_conv(), &cur);
        Trace {
            enc,
            mid,
            dec,
            head_in: cur,
            logits,
        }
    }

    fn backward(&self, trace: &Trace<T>, dlogits: Act<T>, grads: &mut [Vec<T>]) {
        let d = self.config.depth;
        let mut dcur = self
            .conv_back(self.head_conv(), &trace.head_in, &dlogits, grads, true)
            .expect("dx requested");
        let mut skip_grads: Vec<Option<Act<T>>> = (0..d).map(|_| None).collect();
        for j in (0..d).rev() {
            let l = d - 1 - j;
            let rec = &trace.dec[j];
            let first = self.dec_conv(j);
            let dcat = self
                .block_back(first + 1, &rec.block, dcur, grads, true)
                .expect("dx requested");
            let (mut dup, dskip) = split(dcat, rec.up_out.c);
            skip_grads[l] = Some(dskip);
            relu_backward(&rec.up_out, &mut dup);
            let dup_in = self
                .conv_back(first, &rec.up_in, &dup, grads, true)
                .expect("dx requested");
            dcur = upsample_backward(&dup_in);
        }
        dcur = self
            .block_back(self.mid_conv(), &trace.mid, dcur, grads, true)
            .expect("dx requested");
        for l in (0..d).rev() {
            let (rec, arg) = &trace.enc[l];
            let mut dskip = skip_grads[l].take().expect("decoder filled every skip");
            maxpool_backward(&dcur, arg, &mut dskip);
            match self.block_back(2 * l, rec, dskip, grads, l > 0) {
                Some(dx) => dcur = dx,
                None => break,
            }
        }
    }
}

fn check_inputs<T>(config: &UNetConfig, inputs: &[&[T]]) -> Result<()> {
    let n = config.input_size * config.input_size;
    for (i, x) in inputs.iter().enumerate() {
        if x.len() != n {
            return Err(Error::Validation(format!(
                "sample {i} has {} pixels, network expects {}x{}",
                x.len(),
                config.input_size,
                config.input_size
            )));
        }
    }
    Ok(())
}

/// Logits for a single sample; dropout is applied when `dropout_seed` is set.
pub fn forward_raw<T: Real>(
    weights: &Weights<T>,
    config: &UNetConfig,
    input: &[T],
    dropout_seed: Option<u64>,
) -> Result<Vec<T>> {
    check_inputs(config, &[input])?;
    let _ftz = FlushDenormals::new();
    let net = Net::new(weights, config, dropout_seed.map(|s| (config.dropout_rate, s)))?;
    Ok(net.forward(input).logits.data)
}

/// Per-pixel logits for a batch. Dropout is active only in training mode and
/// its masks are a pure function of `seed` and the sample's batch position.
pub fn forward(
    weights: &Weights,
    config: &UNetConfig,
    batch: &[Grid],
    training: bool,
    seed: u64,
) -> Result<Vec<Grid>> {
    let inputs: Vec<&[f32]> = batch.iter().map(|g| g.data.as_slice()).collect();
    check_inputs(config, &inputs)?;
    batch
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let ds = training.then(|| mix_seed(seed, &[i as u64]));
            let logits = forward_raw(weights, config, &g.data, ds)?;
            Grid::from_vec(g.width, g.height, logits)
        })
        .collect()
}

/// Loss, accuracy counts and gradients of one batch.
pub struct BatchGrad<T> {
    /// Mean binary cross entropy over every pixel of the batch.
    pub loss: f64,
    pub correct: usize,
    pub pixels: usize,
    /// One buffer per weight tensor, including the L2 term on kernels.
    pub grads: Vec<Vec<T>>,
}

/// Mean BCE loss over the batch and its gradient with respect to every
/// parameter, plus `l2 * w` on convolution kernels.
pub fn loss_and_gradients<T: Real>(
    weights: &Weights<T>,
    config: &UNetConfig,
    inputs: &[&[T]],
    targets: &[&[T]],
    l2: f64,
    dropout_seed: Option<u64>,
) -> Result<BatchGrad<T>> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::Validation(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    check_inputs(config, inputs)?;
    check_inputs(config, targets)?;
    let _ftz = FlushDenormals::new();
    let mut grads: Vec<Vec<T>> = weights
        .tensors
        .iter()
        .map(|t| vec![T::zero(); t.data.len()])
        .collect();
    let pixels = inputs.len() * config.input_size * config.input_size;
    let scale = 1.0 / pixels as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, (x, z)) in inputs.iter().zip(targets).enumerate() {
        let dropout = dropout_seed.map(|s| (config.dropout_rate, mix_seed(s, &[i as u64])));
        let net = Net::new(weights, config, dropout)?;
        let trace = net.forward(x);
        let mut dlogits = Act::zeros(1, config.input_size, config.input_size);
        for ((g, &lx), &lz) in dlogits.data.iter_mut().zip(&trace.logits.data).zip(z.iter()) {
            let xf = lx.to_f64().unwrap_or(f64::NAN);
            let zf = lz.to_f64().unwrap_or(f64::NAN);
            loss += bce_scalar(xf, zf);
            correct += ((xf > 0.0) == (zf > 0.5)) as usize;
            *g = T::from_f64((sigmoid(xf) - zf) * scale);
        }
        net.backward(&trace, dlogits, &mut grads);
    }
    if l2 != 0.0 {
        let l2 = T::from_f64(l2);
        for (g, t) in grads.iter_mut().zip(&weights.tensors) {
            if t.is_kernel() {
                for (gv, &wv) in g.iter_mut().zip(&t.data) {
                    *gv = *gv + l2 * wv;
                }
            }
        }
    }
    Ok(BatchGrad {
        loss: loss * scale,
        correct,
        pixels,
        grads,
    })
}

/// The scalar that [`loss_and_gradients`] differentiates:
/// mean BCE plus `l2 / 2` times the squared kernel norm.
pub fn objective<T: Real>(
    weights: &Weights<T>,
    config: &UNetConfig,
    inputs: &[&[T]],
    targets: &[&[T]],
    l2: f64,
    dropout_seed: Option<u64>,
) -> Result<f64> {
    check_inputs(config, inputs)?;
    check_inputs(config, targets)?;
    let _ftz = FlushDenormals::new();
    let mut loss = 0.0;
    for (i, (x, z)) in inputs.iter().zip(targets).enumerate() {
        let dropout = dropout_seed.map(|s| (config.dropout_rate, mix_seed(s, &[i as u64])));
        let net = Net::new(weights, config, dropout)?;
        let logits = net.forward(x).logits;
        loss += logits
            .data
            .iter()
            .zip(z.iter())
            .map(|(&lx, &lz)| bce_scalar(lx.to_f64().unwrap_or(f64::NAN), lz.to_f64().unwrap_or(f64::NAN)))
            .sum::<f64>();
    }
    let mean = loss / (inputs.len() * config.input_size * config.input_size) as f64;
    let norm = weights.kernel_l2_norm();
    Ok(mean + 0.5 * l2 * norm * norm)
}

/// Gradients of the regularized mean BCE for an `f32` batch, in inference
/// mode (no dropout), as named tensors.
pub fn backward(
    weights: &Weights,
    config: &UNetConfig,
    batch: &[Grid],
    targets: &[Grid],
    l2: f64,
) -> Result<Weights> {
    let inputs: Vec<&[f32]> = batch.iter().map(|g| g.data.as_slice()).collect();
    let tgts: Vec<&[f32]> = targets.iter().map(|g| g.data.as_slice()).collect();
    let bg = loss_and_gradients(weights, config, &inputs, &tgts, l2, None)?;
    Ok(Weights {
        tensors: weights
            .tensors
            .iter()
            .zip(bg.grads)
            .map(|(t, g)| Tensor {
                name: t.name.clone(),
                dims: t.dims.clone(),
                data: g,
            })
            .collect(),
    })
}
