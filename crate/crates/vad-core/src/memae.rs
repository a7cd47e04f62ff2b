//! Flow-reconstruction autoencoder with a memory module at each of three
//! levels and additive skip connections. Trained on flow cubes from normal
//! clips only, it reconstructs typical motion patterns well and atypical
//! ones poorly; the reconstruction error is the first anomaly signal.

use crate::error::{Result, TensorError, VadError};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemAeHyper {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub num_slots: usize,
    /// Hard shrinkage threshold for addressing weights.
    pub shrink_lambda: f64,
    /// Entropy loss weight (gamma).
    pub entropy_weight: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Deterministic subsample cap on training cubes.
    pub max_cubes: usize,
    pub seed: u64,
}

impl Default for MemAeHyper {
    fn default() -> Self {
        MemAeHyper {
            in_channels: 6,
            widths: [32, 64, 128],
            num_slots: 100,
            shrink_lambda: 0.01,
            entropy_weight: 2e-4,
            lr: 1e-3,
            epochs: 6,
            batch_size: 8,
            max_cubes: 512,
            seed: 1,
        }
    }
}

const LEAK: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct ConvParam<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> ConvParam<S> {
    fn init(out_ch: usize, in_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        ConvParam {
            w: Tensor::rand_uniform(&[out_ch, in_ch, k, k], bound, rng),
            b: Tensor::zeros(&[out_ch]),
        }
    }

    /// Transposed-conv kernels are laid out [in_ch, out_ch, k, k].
    fn init_transpose(in_ch: usize, out_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        ConvParam {
            w: Tensor::rand_uniform(&[in_ch, out_ch, k, k], bound, rng),
            b: Tensor::zeros(&[out_ch]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MemAeParams<S: Scalar> {
    pub enc1: ConvParam<S>,
    pub enc2: ConvParam<S>,
    pub enc3: ConvParam<S>,
    /// Memory matrices per level, finest first: [num_slots, width].
    pub mem: [Tensor<S>; 3],
    pub dec3: ConvParam<S>,
    pub dec2: ConvParam<S>,
    pub out: ConvParam<S>,
}

impl<S: Scalar> MemAeParams<S> {
    pub fn init(hyper: &MemAeHyper) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let [w1, w2, w3] = hyper.widths;
        let mem = [w1, w2, w3].map(|dim| {
            Tensor::rand_uniform(&[hyper.num_slots, dim], 1.0 / (dim as f64).sqrt(), &mut rng)
        });
        MemAeParams {
            enc1: ConvParam::init(w1, hyper.in_channels, 3, &mut rng),
            enc2: ConvParam::init(w2, w1, 4, &mut rng),
            enc3: ConvParam::init(w3, w2, 4, &mut rng),
            mem,
            dec3: ConvParam::init_transpose(w3, w2, 4, &mut rng),
            dec2: ConvParam::init_transpose(w2, w1, 4, &mut rng),
            out: ConvParam::init(hyper.in_channels, w1, 3, &mut rng),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        vec![
            ("enc1.w".into(), &self.enc1.w),
            ("enc1.b".into(), &self.enc1.b),
            ("enc2.w".into(), &self.enc2.w),
            ("enc2.b".into(), &self.enc2.b),
            ("enc3.w".into(), &self.enc3.w),
            ("enc3.b".into(), &self.enc3.b),
            ("mem1".into(), &self.mem[0]),
            ("mem2".into(), &self.mem[1]),
            ("mem3".into(), &self.mem[2]),
            ("dec3.w".into(), &self.dec3.w),
            ("dec3.b".into(), &self.dec3.b),
            ("dec2.w".into(), &self.dec2.w),
            ("dec2.b".into(), &self.dec2.b),
            ("out.w".into(), &self.out.w),
            ("out.b".into(), &self.out.b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let [m1, m2, m3] = &mut self.mem;
        vec![
            ("enc1.w".into(), &mut self.enc1.w),
            ("enc1.b".into(), &mut self.enc1.b),
            ("enc2.w".into(), &mut self.enc2.w),
            ("enc2.b".into(), &mut self.enc2.b),
            ("enc3.w".into(), &mut self.enc3.w),
            ("enc3.b".into(), &mut self.enc3.b),
            ("mem1".into(), m1),
            ("mem2".into(), m2),
            ("mem3".into(), m3),
            ("dec3.w".into(), &mut self.dec3.w),
            ("dec3.b".into(), &mut self.dec3.b),
            ("dec2.w".into(), &mut self.dec2.w),
            ("dec2.b".into(), &mut self.dec2.b),
            ("out.w".into(), &mut self.out.w),
            ("out.b".into(), &mut self.out.b),
        ]
    }

    pub fn from_named(mut tensors: Vec<(String, Tensor<S>)>, hyper: &MemAeHyper) -> Result<Self> {
        let mut take = |name: &str| -> Result<Tensor<S>> {
            let idx = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| VadError::Other(format!("checkpoint missing tensor {name}")))?;
            Ok(tensors.swap_remove(idx).1)
        };
        let params = MemAeParams {
            enc1: ConvParam { w: take("enc1.w")?, b: take("enc1.b")? },
            enc2: ConvParam { w: take("enc2.w")?, b: take("enc2.b")? },
            enc3: ConvParam { w: take("enc3.w")?, b: take("enc3.b")? },
            mem: [take("mem1")?, take("mem2")?, take("mem3")?],
            dec3: ConvParam { w: take("dec3.w")?, b: take("dec3.b")? },
            dec2: ConvParam { w: take("dec2.w")?, b: take("dec2.b")? },
            out: ConvParam { w: take("out.w")?, b: take("out.b")? },
        };
        let [w1, w2, w3] = hyper.widths;
        if params.mem[0].shape() != [hyper.num_slots, w1]
            || params.mem[1].shape() != [hyper.num_slots, w2]
            || params.mem[2].shape() != [hyper.num_slots, w3]
        {
            return Err(VadError::Other("checkpoint memory shape mismatch".into()));
        }
        Ok(params)
    }
}

/// Per-tape handles to the bound parameters.
pub struct MemAeBound {
    enc1: (Var, Var),
    enc2: (Var, Var),
    enc3: (Var, Var),
    mem: [Var; 3],
    dec3: (Var, Var),
    dec2: (Var, Var),
    out: (Var, Var),
}

pub fn bind<S: Scalar>(tape: &mut Tape<S>, params: &MemAeParams<S>, trainable: bool) -> MemAeBound {
    let mut leaf = |t: &Tensor<S>| tape.leaf(t.clone(), trainable);
    MemAeBound {
        enc1: (leaf(&params.enc1.w), leaf(&params.enc1.b)),
        enc2: (leaf(&params.enc2.w), leaf(&params.enc2.b)),
        enc3: (leaf(&params.enc3.w), leaf(&params.enc3.b)),
        mem: [leaf(&params.mem[0]), leaf(&params.mem[1]), leaf(&params.mem[2])],
        dec3: (leaf(&params.dec3.w), leaf(&params.dec3.b)),
        dec2: (leaf(&params.dec2.w), leaf(&params.dec2.b)),
        out: (leaf(&params.out.w), leaf(&params.out.b)),
    }
}

impl MemAeBound {
    pub fn grads<S: Scalar>(&self, tape: &Tape<S>) -> Vec<Tensor<S>> {
        self.var_order()
            .iter()
            .map(|v| tape.grad(*v).expect("gradient present").clone())
            .collect()
    }

    pub fn var_order(&self) -> Vec<Var> {
        vec![
            self.enc1.0, self.enc1.1, self.enc2.0, self.enc2.1, self.enc3.0, self.enc3.1,
            self.mem[0], self.mem[1], self.mem[2],
            self.dec3.0, self.dec3.1, self.dec2.0, self.dec2.1, self.out.0, self.out.1,
        ]
    }
}

pub fn param_order_mut<S: Scalar>(params: &mut MemAeParams<S>) -> Vec<&mut Tensor<S>> {
    params.named_mut().into_iter().map(|(_, t)| t).collect()
}

/// Memory addressing over a feature map: cosine-similarity softmax across
/// slots, hard shrinkage with renormalization, then slot readout. Returns
/// the per-query weights [B*H*W, slots] and the readout [B,C,H,W].
pub fn memory_address<S: Scalar>(
    tape: &mut Tape<S>,
    feat: Var,
    mem: Var,
    lambda: f64,
) -> Result<(Var, Var), TensorError> {
    let shape = tape.value(feat)?.shape().to_vec();
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "memory_address",
            expected: vec![0, 0, 0, 0],
            got: shape,
        });
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let queries = tape.permute(feat, &[0, 2, 3, 1])?;
    let queries = tape.reshape(queries, vec![b * h * w, c])?;
    let qn = tape.row_l2_normalize(queries)?;
    let mn = tape.row_l2_normalize(mem)?;
    let mnt = tape.permute(mn, &[1, 0])?;
    let sims = tape.matmul(qn, mnt)?;
    let weights = tape.softmax(sims, 1)?;
    let weights = tape.hard_shrink_renormalize(weights, lambda)?;
    let readout = tape.matmul(weights, mem)?;
    let readout = tape.reshape(readout, vec![b, h, w, c])?;
    let readout = tape.permute(readout, &[0, 3, 1, 2])?;
    Ok((weights, readout))
}

/// Single-query convenience over `memory_address`.
pub fn memory_address_single<S: Scalar>(
    query: &Tensor<S>,
    mem: &Tensor<S>,
    lambda: f64,
) -> Result<(Tensor<S>, Tensor<S>), TensorError> {
    let dim = query.numel();
    let mut tape = Tape::<S>::new();
    let q = tape.leaf(query.reshaped(vec![1, dim, 1, 1])?, false);
    let m = tape.leaf(mem.clone(), false);
    let (w, out) = memory_address(&mut tape, q, m, lambda)?;
    Ok((
        tape.value(w)?.reshaped(vec![mem.shape()[0]])?,
        tape.value(out)?.reshaped(vec![dim])?,
    ))
}

/// Mean over queries of -sum_i w_i ln(w_i + eps).
pub fn entropy_loss<S: Scalar>(tape: &mut Tape<S>, weights: Var) -> Result<Var, TensorError> {
    let rows = tape.value(weights)?.shape()[0];
    let shifted = tape.add_scalar(weights, 1e-12)?;
    let logs = tape.log(shifted)?;
    let prod = tape.mul(weights, logs)?;
    let total = tape.reduce_sum(prod)?;
    tape.scale(total, -1.0 / rows as f64)
}

pub struct MemAeForward {
    pub recon: Var,
    /// Addressing weights per level, finest first.
    pub weights: [Var; 3],
}

/// Encoder -> memory at the bottleneck -> decoder with additive skips and a
/// memory module after each merge. Output is linear (flow values are signed).
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &MemAeBound,
    input: Var,
    hyper: &MemAeHyper,
) -> Result<MemAeForward, TensorError> {
    let shape = tape.value(input)?.shape().to_vec();
    if shape.len() != 4 || shape[1] != hyper.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "memae_forward",
            expected: vec![0, hyper.in_channels, 0, 0],
            got: shape,
        });
    }
    let lam = hyper.shrink_lambda;
    let e1 = conv_block(tape, input, bound.enc1, 1, 1)?;
    let e2 = conv_block(tape, e1, bound.enc2, 2, 1)?;
    let e3 = conv_block(tape, e2, bound.enc3, 2, 1)?;

    let (w3, m3) = memory_address(tape, e3, bound.mem[2], lam)?;
    let d3 = deconv_block(tape, m3, bound.dec3, 2, 1)?;
    let s2 = tape.add(d3, e2)?;
    let (w2, m2) = memory_address(tape, s2, bound.mem[1], lam)?;
    let d2 = deconv_block(tape, m2, bound.dec2, 2, 1)?;
    let s1 = tape.add(d2, e1)?;
    let (w1, m1) = memory_address(tape, s1, bound.mem[0], lam)?;

    let pre = tape.conv2d(m1, bound.out.0, 1, 1)?;
    let recon = tape.bias_add(pre, bound.out.1)?;
    Ok(MemAeForward {
        recon,
        weights: [w1, w2, w3],
    })
}

fn conv_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    (w, b): (Var, Var),
    stride: usize,
    pad: usize,
) -> Result<Var, TensorError> {
    let y = tape.conv2d(x, w, stride, pad)?;
    let y = tape.bias_add(y, b)?;
    tape.leaky_relu(y, LEAK)
}

fn deconv_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    (w, b): (Var, Var),
    stride: usize,
    pad: usize,
) -> Result<Var, TensorError> {
    let y = tape.conv2d_transpose(x, w, stride, pad)?;
    let y = tape.bias_add(y, b)?;
    tape.leaky_relu(y, LEAK)
}

pub struct MemAeLoss {
    pub total: Var,
    pub recon_mse: Var,
    pub entropy: Var,
}

/// total = mse(input, recon) + gamma * sum over levels of entropy.
pub fn loss<S: Scalar>(
    tape: &mut Tape<S>,
    fwd: &MemAeForward,
    input: Var,
    hyper: &MemAeHyper,
) -> Result<MemAeLoss, TensorError> {
    let recon_mse = tape.mse(fwd.recon, input)?;
    let e1 = entropy_loss(tape, fwd.weights[0])?;
    let e2 = entropy_loss(tape, fwd.weights[1])?;
    let e3 = entropy_loss(tape, fwd.weights[2])?;
    let e12 = tape.add(e1, e2)?;
    let entropy = tape.add(e12, e3)?;
    let weighted = tape.scale(entropy, hyper.entropy_weight)?;
    let total = tape.add(recon_mse, weighted)?;
    Ok(MemAeLoss {
        total,
        recon_mse,
        entropy,
    })
}

/// Stack per-cube inputs [C,H,W] into a batch [B,C,H,W].
pub fn stack_batch<S: Scalar>(inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let shape = inputs[0].shape().to_vec();
    let mut data = Vec::with_capacity(inputs.len() * inputs[0].numel());
    for t in inputs {
        if t.shape() != shape {
            return Err(VadError::Tensor(TensorError::ShapeMismatch {
                op: "stack_batch",
                expected: shape,
                got: t.shape().to_vec(),
            }));
        }
        data.extend_from_slice(t.data());
    }
    let mut out_shape = vec![inputs.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::from_vec(out_shape, data).map_err(VadError::Tensor)
}

/// Deterministic training: seeded init, seeded shuffles, serial batches.
/// Returns the trained params and the per-epoch mean training loss.
pub fn train<S: Scalar>(
    inputs: &[Tensor<S>],
    hyper: &MemAeHyper,
) -> Result<(MemAeParams<S>, Vec<f64>)> {
    if inputs.is_empty() {
        return Err(VadError::Config("memae training needs at least one cube".into()));
    }
    let mut params = MemAeParams::init(hyper);
    let mut opt = Adam::new(hyper.lr).map_err(VadError::Tensor)?;
    let mut curve = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..inputs.len().min(hyper.max_cubes)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5EED);
    for _epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let batch: Vec<&Tensor<S>> = chunk.iter().map(|&i| &inputs[i]).collect();
            let batch = stack_batch(&batch)?;
            let mut tape = Tape::<S>::new();
            let bound = bind(&mut tape, &params, true);
            let x = tape.constant(batch);
            let fwd = forward(&mut tape, &bound, x, hyper).map_err(VadError::Tensor)?;
            let l = loss(&mut tape, &fwd, x, hyper).map_err(VadError::Tensor)?;
            let lv = tape.scalar_value(l.total).map_err(VadError::Tensor)?.to_f64();
            if !lv.is_finite() {
                return Err(VadError::Divergence(format!(
                    "memae loss became non-finite at step {seen}"
                )));
            }
            tape.backward(l.total).map_err(VadError::Tensor)?;
            let grads = bound.grads(&tape);
            let mut slots = param_order_mut(&mut params);
            opt.step(
                &mut slots.iter_mut().map(|t| &mut **t).collect::<Vec<_>>(),
                &grads.iter().collect::<Vec<_>>(),
            )
            .map_err(VadError::Tensor)?;
            epoch_loss += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        curve.push(epoch_loss / seen as f64);
    }
    Ok((params, curve))
}

/// Inference-only reconstruction of a batch.
pub fn reconstruct<S: Scalar>(
    params: &MemAeParams<S>,
    input: &Tensor<S>,
    hyper: &MemAeHyper,
) -> Result<Tensor<S>> {
    let mut tape = Tape::<S>::new();
    let bound = bind(&mut tape, params, false);
    let x = tape.constant(input.clone());
    let fwd = forward(&mut tape, &bound, x, hyper).map_err(VadError::Tensor)?;
    Ok(tape.value(fwd.recon).map_err(VadError::Tensor)?.clone())
}
