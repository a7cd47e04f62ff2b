//! Conditional VAE predicting the next frame crop from the past crop window
//! and the reconstructed flow. The posterior sees both condition and flow;
//! a learned conditional prior makes deterministic prior-mean prediction
//! meaningful at test time.

use crate::error::{Result, TensorError, VadError};
use crate::memae::{self, ConvParam, MemAeBound, MemAeHyper, MemAeParams};
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
pub struct CvaeHyper {
    pub cond_channels: usize,
    pub flow_channels: usize,
    pub widths: [usize; 3],
    pub z_dim: usize,
    /// KL weight (beta).
    pub beta: f64,
    /// Spatial side of the input crops; the bottleneck is input_size / 4.
    pub input_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_cubes: usize,
    pub seed: u64,
}

impl Default for CvaeHyper {
    fn default() -> Self {
        CvaeHyper {
            cond_channels: 12,
            flow_channels: 6,
            widths: [32, 64, 128],
            z_dim: 64,
            beta: 0.1,
            input_size: 32,
            lr: 1e-3,
            epochs: 6,
            batch_size: 8,
            max_cubes: 512,
            seed: 2,
        }
    }
}

impl CvaeHyper {
    fn bottleneck(&self) -> usize {
        self.input_size / 4
    }

    fn flat_dim(&self) -> usize {
        self.widths[2] * self.bottleneck() * self.bottleneck()
    }
}

const LEAK: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct LinParam<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LinParam<S> {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        LinParam {
            w: Tensor::rand_uniform(&[in_dim, out_dim], bound, rng),
            b: Tensor::zeros(&[out_dim]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CvaeParams<S: Scalar> {
    pub cond1: ConvParam<S>,
    pub cond2: ConvParam<S>,
    pub cond3: ConvParam<S>,
    pub flow1: ConvParam<S>,
    pub flow2: ConvParam<S>,
    pub flow3: ConvParam<S>,
    pub post_conv: ConvParam<S>,
    pub post_mu: LinParam<S>,
    pub post_logvar: LinParam<S>,
    pub prior_conv: ConvParam<S>,
    pub prior_mu: LinParam<S>,
    pub prior_logvar: LinParam<S>,
    pub dec_fc: LinParam<S>,
    pub dec_conv: ConvParam<S>,
    pub dec_up2: ConvParam<S>,
    pub dec_up1: ConvParam<S>,
    pub dec_out: ConvParam<S>,
}

macro_rules! cvae_fields {
    ($macro_cb:ident) => {
        $macro_cb!(
            (cond1, w, b), (cond2, w, b), (cond3, w, b),
            (flow1, w, b), (flow2, w, b), (flow3, w, b),
            (post_conv, w, b), (post_mu, w, b), (post_logvar, w, b),
            (prior_conv, w, b), (prior_mu, w, b), (prior_logvar, w, b),
            (dec_fc, w, b), (dec_conv, w, b), (dec_up2, w, b), (dec_up1, w, b),
            (dec_out, w, b)
        )
    };
}

impl<S: Scalar> CvaeParams<S> {
    pub fn init(hyper: &CvaeHyper) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let [w1, w2, w3] = hyper.widths;
        let flat = hyper.flat_dim();
        let conv = |o: usize, i: usize, k: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / ((i * k * k) as f64).sqrt();
            ConvParam {
                w: Tensor::rand_uniform(&[o, i, k, k], bound, rng),
                b: Tensor::zeros(&[o]),
            }
        };
        let deconv = |i: usize, o: usize, k: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / ((i * k * k) as f64).sqrt();
            ConvParam {
                w: Tensor::rand_uniform(&[i, o, k, k], bound, rng),
                b: Tensor::zeros(&[o]),
            }
        };
        CvaeParams {
            cond1: conv(w1, hyper.cond_channels, 3, &mut rng),
            cond2: conv(w2, w1, 4, &mut rng),
            cond3: conv(w3, w2, 4, &mut rng),
            flow1: conv(w1, hyper.flow_channels, 3, &mut rng),
            flow2: conv(w2, w1, 4, &mut rng),
            flow3: conv(w3, w2, 4, &mut rng),
            post_conv: conv(w3, 2 * w3, 3, &mut rng),
            post_mu: LinParam::init(flat, hyper.z_dim, &mut rng),
            post_logvar: LinParam::init(flat, hyper.z_dim, &mut rng),
            prior_conv: conv(w3, w3, 3, &mut rng),
            prior_mu: LinParam::init(flat, hyper.z_dim, &mut rng),
            prior_logvar: LinParam::init(flat, hyper.z_dim, &mut rng),
            dec_fc: LinParam::init(hyper.z_dim, flat, &mut rng),
            dec_conv: conv(w3, 2 * w3, 3, &mut rng),
            dec_up2: deconv(w3, w2, 4, &mut rng),
            dec_up1: deconv(w2, w1, 4, &mut rng),
            dec_out: conv(3, w1, 3, &mut rng),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        macro_rules! collect {
            ($(($f:ident, $w:ident, $b:ident)),*) => {
                vec![$(
                    (concat!(stringify!($f), ".w").to_string(), &self.$f.$w),
                    (concat!(stringify!($f), ".b").to_string(), &self.$f.$b),
                )*]
            };
        }
        cvae_fields!(collect)
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        macro_rules! collect {
            ($(($f:ident, $w:ident, $b:ident)),*) => {
                vec![$(
                    (concat!(stringify!($f), ".w").to_string(), &mut self.$f.$w),
                    (concat!(stringify!($f), ".b").to_string(), &mut self.$f.$b),
                )*]
            };
        }
        cvae_fields!(collect)
    }

    pub fn from_named(mut tensors: Vec<(String, Tensor<S>)>, hyper: &CvaeHyper) -> Result<Self> {
        fn take<S: Scalar>(
            tensors: &mut Vec<(String, Tensor<S>)>,
            name: &str,
        ) -> Result<Tensor<S>> {
            let idx = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| VadError::Other(format!("checkpoint missing tensor {name}")))?;
            Ok(tensors.swap_remove(idx).1)
        }
        fn cp<S: Scalar>(
            tensors: &mut Vec<(String, Tensor<S>)>,
            f: &str,
        ) -> Result<ConvParam<S>> {
            Ok(ConvParam {
                w: take(tensors, &format!("{f}.w"))?,
                b: take(tensors, &format!("{f}.b"))?,
            })
        }
        let tensors = &mut tensors;
        let params = CvaeParams {
            cond1: cp(tensors, "cond1")?,
            cond2: cp(tensors, "cond2")?,
            cond3: cp(tensors, "cond3")?,
            flow1: cp(tensors, "flow1")?,
            flow2: cp(tensors, "flow2")?,
            flow3: cp(tensors, "flow3")?,
            post_conv: cp(tensors, "post_conv")?,
            post_mu: LinParam { w: take(tensors, "post_mu.w")?, b: take(tensors, "post_mu.b")? },
            post_logvar: LinParam {
                w: take(tensors, "post_logvar.w")?,
                b: take(tensors, "post_logvar.b")?,
            },
            prior_conv: cp(tensors, "prior_conv")?,
            prior_mu: LinParam { w: take(tensors, "prior_mu.w")?, b: take(tensors, "prior_mu.b")? },
            prior_logvar: LinParam {
                w: take(tensors, "prior_logvar.w")?,
                b: take(tensors, "prior_logvar.b")?,
            },
            dec_fc: LinParam { w: take(tensors, "dec_fc.w")?, b: take(tensors, "dec_fc.b")? },
            dec_conv: cp(tensors, "dec_conv")?,
            dec_up2: cp(tensors, "dec_up2")?,
            dec_up1: cp(tensors, "dec_up1")?,
            dec_out: cp(tensors, "dec_out")?,
        };
        if params.post_mu.w.shape() != [hyper.flat_dim(), hyper.z_dim] {
            return Err(VadError::Other("checkpoint posterior head shape mismatch".into()));
        }
        Ok(params)
    }
}

pub struct CvaeBound {
    vars: Vec<Var>,
}

pub fn bind<S: Scalar>(tape: &mut Tape<S>, params: &CvaeParams<S>, trainable: bool) -> CvaeBound {
    let vars = params
        .named()
        .into_iter()
        .map(|(_, t)| tape.leaf(t.clone(), trainable))
        .collect();
    CvaeBound { vars }
}

impl CvaeBound {
    // Indices follow the `named()` order: 2 vars per layer.
    fn layer(&self, idx: usize) -> (Var, Var) {
        (self.vars[2 * idx], self.vars[2 * idx + 1])
    }

    pub fn var_order(&self) -> &[Var] {
        &self.vars
    }

    pub fn grads<S: Scalar>(&self, tape: &Tape<S>) -> Vec<Tensor<S>> {
        self.vars
            .iter()
            .map(|v| tape.grad(*v).expect("gradient present").clone())
            .collect()
    }
}

const L_COND1: usize = 0;
const L_COND2: usize = 1;
const L_COND3: usize = 2;
const L_FLOW1: usize = 3;
const L_FLOW2: usize = 4;
const L_FLOW3: usize = 5;
const L_POST_CONV: usize = 6;
const L_POST_MU: usize = 7;
const L_POST_LOGVAR: usize = 8;
const L_PRIOR_CONV: usize = 9;
const L_PRIOR_MU: usize = 10;
const L_PRIOR_LOGVAR: usize = 11;
const L_DEC_FC: usize = 12;
const L_DEC_CONV: usize = 13;
const L_DEC_UP2: usize = 14;
const L_DEC_UP1: usize = 15;
const L_DEC_OUT: usize = 16;

/// How the latent is produced in a forward pass.
pub enum LatentMode<'a, S: Scalar> {
    /// Reparameterized sample z = mu + sigma * eps with the given noise.
    Sample(&'a Tensor<S>),
    /// z = posterior mean (the sigma-forced-to-zero degenerate case).
    PosteriorMean,
    /// z = prior mean; the deterministic test-time default.
    PriorMean,
}

pub struct CvaeForward {
    pub x_hat: Var,
    pub mu: Var,
    pub logvar: Var,
    pub mu0: Var,
    pub logvar0: Var,
}

fn conv_lrelu<S: Scalar>(
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

fn deconv_lrelu<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    (w, b): (Var, Var),
) -> Result<Var, TensorError> {
    let y = tape.conv2d_transpose(x, w, 2, 1)?;
    let y = tape.bias_add(y, b)?;
    tape.leaky_relu(y, LEAK)
}

fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, (w, b): (Var, Var)) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.bias_add(y, b)
}

/// Full forward pass. `cond` is [B, cond_channels, s, s]; `flow_recon` is the
/// reconstructed flow [B, flow_channels, s, s].
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &CvaeBound,
    cond: Var,
    flow_recon: Var,
    mode: LatentMode<'_, S>,
    hyper: &CvaeHyper,
) -> Result<CvaeForward, TensorError> {
    let batch = tape.value(cond)?.shape()[0];
    let s = hyper.bottleneck();
    let flat = hyper.flat_dim();

    let c1 = conv_lrelu(tape, cond, bound.layer(L_COND1), 1, 1)?;
    let c2 = conv_lrelu(tape, c1, bound.layer(L_COND2), 2, 1)?;
    let cond_feat = conv_lrelu(tape, c2, bound.layer(L_COND3), 2, 1)?;

    let f1 = conv_lrelu(tape, flow_recon, bound.layer(L_FLOW1), 1, 1)?;
    let f2 = conv_lrelu(tape, f1, bound.layer(L_FLOW2), 2, 1)?;
    let flow_feat = conv_lrelu(tape, f2, bound.layer(L_FLOW3), 2, 1)?;

    let joint = tape.concat(&[cond_feat, flow_feat], 1)?;
    let post = conv_lrelu(tape, joint, bound.layer(L_POST_CONV), 1, 1)?;
    let post_flat = tape.reshape(post, vec![batch, flat])?;
    let mu = linear(tape, post_flat, bound.layer(L_POST_MU))?;
    let logvar = linear(tape, post_flat, bound.layer(L_POST_LOGVAR))?;

    let prior = conv_lrelu(tape, cond_feat, bound.layer(L_PRIOR_CONV), 1, 1)?;
    let prior_flat = tape.reshape(prior, vec![batch, flat])?;
    let mu0 = linear(tape, prior_flat, bound.layer(L_PRIOR_MU))?;
    let logvar0 = linear(tape, prior_flat, bound.layer(L_PRIOR_LOGVAR))?;

    let z = match mode {
        LatentMode::Sample(eps) => {
            let half = tape.scale(logvar, 0.5)?;
            let sigma = tape.exp(half)?;
            let noise = tape.constant(eps.clone());
            let scaled = tape.mul(sigma, noise)?;
            tape.add(mu, scaled)?
        }
        LatentMode::PosteriorMean => mu,
        LatentMode::PriorMean => mu0,
    };

    let d = linear(tape, z, bound.layer(L_DEC_FC))?;
    let d = tape.reshape(d, vec![batch, hyper.widths[2], s, s])?;
    let d = tape.concat(&[d, cond_feat], 1)?;
    let d = conv_lrelu(tape, d, bound.layer(L_DEC_CONV), 1, 1)?;
    let d = deconv_lrelu(tape, d, bound.layer(L_DEC_UP2))?;
    let d = deconv_lrelu(tape, d, bound.layer(L_DEC_UP1))?;
    let pre = tape.conv2d(d, bound.layer(L_DEC_OUT).0, 1, 1)?;
    let pre = tape.bias_add(pre, bound.layer(L_DEC_OUT).1)?;
    let x_hat = tape.sigmoid(pre)?;

    Ok(CvaeForward {
        x_hat,
        mu,
        logvar,
        mu0,
        logvar0,
    })
}

pub struct CvaeLoss {
    pub total: Var,
    pub pred_mse: Var,
    pub kl: Var,
}

/// mse(x_hat, target) + beta * KL(posterior || learned prior).
pub fn loss<S: Scalar>(
    tape: &mut Tape<S>,
    fwd: &CvaeForward,
    target: Var,
    hyper: &CvaeHyper,
) -> Result<CvaeLoss, TensorError> {
    let pred_mse = tape.mse(fwd.x_hat, target)?;
    let kl = tape.kl_diag_gaussians(fwd.mu, fwd.logvar, fwd.mu0, fwd.logvar0)?;
    let weighted = tape.scale(kl, hyper.beta)?;
    let total = tape.add(pred_mse, weighted)?;
    Ok(CvaeLoss {
        total,
        pred_mse,
        kl,
    })
}

/// One training sample: condition window, reconstructed flow, target crop.
pub struct CvaeSample<S: Scalar> {
    pub cond: Tensor<S>,
    pub flow_recon: Tensor<S>,
    pub target: Tensor<S>,
}

/// Stage-2 training on precomputed flow reconstructions (the flow model is
/// frozen upstream). Deterministic for a fixed seed.
pub fn train<S: Scalar>(
    samples: &[CvaeSample<S>],
    hyper: &CvaeHyper,
) -> Result<(CvaeParams<S>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(VadError::Config("cvae training needs at least one cube".into()));
    }
    let mut params = CvaeParams::init(hyper);
    let mut opt = Adam::new(hyper.lr).map_err(VadError::Tensor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xCAFE);
    let mut order: Vec<usize> = (0..samples.len().min(hyper.max_cubes)).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);
    for _epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let cond = memae::stack_batch(&chunk.iter().map(|&i| &samples[i].cond).collect::<Vec<_>>())?;
            let flow =
                memae::stack_batch(&chunk.iter().map(|&i| &samples[i].flow_recon).collect::<Vec<_>>())?;
            let target =
                memae::stack_batch(&chunk.iter().map(|&i| &samples[i].target).collect::<Vec<_>>())?;
            let eps = Tensor::<S>::rand_normal(&[chunk.len(), hyper.z_dim], 0.0, 1.0, &mut rng);

            let mut tape = Tape::<S>::new();
            let bound = bind(&mut tape, &params, true);
            let c = tape.constant(cond);
            let f = tape.constant(flow);
            let t = tape.constant(target);
            let fwd = forward(&mut tape, &bound, c, f, LatentMode::Sample(&eps), hyper)
                .map_err(VadError::Tensor)?;
            let l = loss(&mut tape, &fwd, t, hyper).map_err(VadError::Tensor)?;
            let lv = tape.scalar_value(l.total).map_err(VadError::Tensor)?.to_f64();
            if !lv.is_finite() {
                return Err(VadError::Divergence("cvae loss became non-finite".into()));
            }
            tape.backward(l.total).map_err(VadError::Tensor)?;
            let grads = bound.grads(&tape);
            let mut slots: Vec<&mut Tensor<S>> =
                params.named_mut().into_iter().map(|(_, t)| t).collect();
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

/// Inference: predict the next crop, deterministic in prior-mean mode.
pub fn predict<S: Scalar>(
    params: &CvaeParams<S>,
    cond: &Tensor<S>,
    flow_recon: &Tensor<S>,
    mode: LatentMode<'_, S>,
    hyper: &CvaeHyper,
) -> Result<Tensor<S>> {
    let mut tape = Tape::<S>::new();
    let bound = bind(&mut tape, params, false);
    let c = tape.constant(cond.clone());
    let f = tape.constant(flow_recon.clone());
    let fwd = forward(&mut tape, &bound, c, f, mode, hyper).map_err(VadError::Tensor)?;
    Ok(tape.value(fwd.x_hat).map_err(VadError::Tensor)?.clone())
}

/// One raw fine-tuning sample: the flow cube still needs reconstructing.
pub struct JointSample<S: Scalar> {
    pub cond: Tensor<S>,
    pub flow: Tensor<S>,
    pub target: Tensor<S>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_cubes: usize,
    pub seed: u64,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        FinetuneHyper {
            lr: 3e-4,
            epochs: 2,
            batch_size: 8,
            max_cubes: 512,
            seed: 4,
        }
    }
}

/// Stage 3: adjust both models together. The combined loss is the flow
/// reconstruction loss plus the prediction loss at equal weights, and the
/// prediction consumes the live flow reconstruction so gradients couple the
/// two models.
pub fn finetune_joint<S: Scalar>(
    samples: &[JointSample<S>],
    memae_params: &mut MemAeParams<S>,
    cvae_params: &mut CvaeParams<S>,
    memae_hyper: &MemAeHyper,
    cvae_hyper: &CvaeHyper,
    ft: &FinetuneHyper,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(VadError::Config("finetune needs at least one cube".into()));
    }
    let mut opt = Adam::new(ft.lr).map_err(VadError::Tensor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ft.seed ^ 0xF17E);
    let mut order: Vec<usize> = (0..samples.len().min(ft.max_cubes)).collect();
    let mut curve = Vec::with_capacity(ft.epochs);
    for _epoch in 0..ft.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(ft.batch_size.max(1)) {
            let cond = memae::stack_batch(&chunk.iter().map(|&i| &samples[i].cond).collect::<Vec<_>>())?;
            let flow = memae::stack_batch(&chunk.iter().map(|&i| &samples[i].flow).collect::<Vec<_>>())?;
            let target =
                memae::stack_batch(&chunk.iter().map(|&i| &samples[i].target).collect::<Vec<_>>())?;
            let eps = Tensor::<S>::rand_normal(&[chunk.len(), cvae_hyper.z_dim], 0.0, 1.0, &mut rng);

            let mut tape = Tape::<S>::new();
            let mem_bound: MemAeBound = memae::bind(&mut tape, memae_params, true);
            let cvae_bound = bind(&mut tape, cvae_params, true);
            let c = tape.constant(cond);
            let y = tape.constant(flow);
            let t = tape.constant(target);
            let mem_fwd = memae::forward(&mut tape, &mem_bound, y, memae_hyper)
                .map_err(VadError::Tensor)?;
            let mem_loss =
                memae::loss(&mut tape, &mem_fwd, y, memae_hyper).map_err(VadError::Tensor)?;
            let cvae_fwd = forward(
                &mut tape,
                &cvae_bound,
                c,
                mem_fwd.recon,
                LatentMode::Sample(&eps),
                cvae_hyper,
            )
            .map_err(VadError::Tensor)?;
            let cvae_loss = loss(&mut tape, &cvae_fwd, t, cvae_hyper).map_err(VadError::Tensor)?;
            let total = tape
                .add(mem_loss.total, cvae_loss.total)
                .map_err(VadError::Tensor)?;
            let lv = tape.scalar_value(total).map_err(VadError::Tensor)?.to_f64();
            if !lv.is_finite() {
                return Err(VadError::Divergence("joint loss became non-finite".into()));
            }
            tape.backward(total).map_err(VadError::Tensor)?;

            let mem_grads = mem_bound.grads(&tape);
            let cvae_grads = cvae_bound.grads(&tape);
            let mut mem_slots = memae::param_order_mut(memae_params);
            let mut cvae_slots: Vec<&mut Tensor<S>> =
                cvae_params.named_mut().into_iter().map(|(_, t)| t).collect();
            let mut all: Vec<&mut Tensor<S>> = Vec::with_capacity(mem_slots.len() + cvae_slots.len());
            all.extend(mem_slots.iter_mut().map(|t| &mut **t));
            all.extend(cvae_slots.iter_mut().map(|t| &mut **t));
            let all_grads: Vec<&Tensor<S>> = mem_grads.iter().chain(cvae_grads.iter()).collect();
            opt.step(&mut all, &all_grads).map_err(VadError::Tensor)?;
            epoch_loss += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        curve.push(epoch_loss / seen as f64);
    }
    Ok(curve)
}
