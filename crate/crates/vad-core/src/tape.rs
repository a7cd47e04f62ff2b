//! Reverse-mode autodiff over dense tensors.
//!
//! The graph is an explicit tape rebuilt for every forward pass. Each op
//! pushes one node; `backward` walks the tape in exact reverse order and
//! accumulates gradients additively into the inputs. Every op output is
//! checked for non-finite values and surfaced as an error rather than
//! propagated.

use crate::conv::{conv2d_bwd_input, conv2d_bwd_kernel, conv2d_fwd, conv_out_size, conv_transpose_out_size, ConvDims};
use crate::error::TensorError;
use crate::image::{resize_bilinear, resize_bilinear_adjoint};
use crate::scalar::Scalar;
use crate::tensor::{invert_axes, permute, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Clone)]
struct Conv2dRec {
    input: usize,
    kernel: usize,
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2dRec {
    fn dims(&self) -> ConvDims {
        ConvDims {
            batch: self.batch,
            in_ch: self.in_ch,
            in_h: self.in_h,
            in_w: self.in_w,
            out_ch: self.out_ch,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            out_h: self.out_h,
            out_w: self.out_w,
        }
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize, usize),
    Matmul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Conv2d(Conv2dRec),
    ConvTranspose2d(Conv2dRec),
    BiasAdd(usize, usize),
    BilinearResize(usize),
    ReduceSum(usize),
    ReduceMean(usize),
    Mse(usize, usize),
    KlGauss {
        mu: usize,
        logvar: usize,
        mu0: usize,
        logvar0: usize,
    },
    RowNormalize(usize),
    HardShrink(usize, f64),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
    grad: Option<Tensor<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

const NORMALIZE_EPS: f64 = 1e-8;

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, contrib: Tensor<S>) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += *c;
            }
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(id)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<S>, TensorError> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(TensorError::DetachedVar { id: v.0 })
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_ref())
    }

    pub fn scalar_value(&self, v: Var) -> Result<S, TensorError> {
        let t = self.value(v)?;
        if t.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: t.shape().to_vec(),
            });
        }
        Ok(t.data()[0])
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::DetachedVar { id: v.0 });
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<S>, op: Op, op_name: &'static str, needs_grad: bool) -> Result<Var, TensorError> {
        if !value.is_all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Ok(Var(id))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(shape, data)?, Op::Add(a.0, b.0), "add", needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| *x - *y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(shape, data)?, Op::Sub(a.0, b.0), "sub", needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(shape, data)?, Op::Mul(a.0, b.0), "mul", needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.check(a)?;
        let cs = S::from_f64(c);
        let value = self.nodes[a.0].value.map(|v| v * cs);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a.0, c), "scale", needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.check(a)?;
        let cs = S::from_f64(c);
        let value = self.nodes[a.0].value.map(|v| v + cs);
        let needs = self.needs(a);
        self.push(value, Op::AddScalar(a.0), "add_scalar", needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = self.nodes[a.0].value.map(|v| v.maxs(S::ZERO));
        let needs = self.needs(a);
        self.push(value, Op::Relu(a.0), "relu", needs)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var, TensorError> {
        self.check(a)?;
        let al = S::from_f64(alpha);
        let value = self.nodes[a.0].value.map(|v| if v > S::ZERO { v } else { v * al });
        let needs = self.needs(a);
        self.push(value, Op::LeakyRelu(a.0, alpha), "leaky_relu", needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = self.nodes[a.0]
            .value
            .map(|v| S::ONE / (S::ONE + (-v).exp()));
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a.0), "sigmoid", needs)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = self.nodes[a.0].value.map(|v| v.tanh());
        let needs = self.needs(a);
        self.push(value, Op::Tanh(a.0), "tanh", needs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = self.nodes[a.0].value.map(|v| v.exp());
        let needs = self.needs(a);
        self.push(value, Op::Exp(a.0), "exp", needs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = self.nodes[a.0].value.map(|v| v.ln());
        let needs = self.needs(a);
        self.push(value, Op::Log(a.0), "log", needs)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check(a)?;
        let shape = self.nodes[a.0].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let lanes = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.nodes[a.0].value.data();
        let mut out = vec![S::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut max = src[o * lanes * inner + i];
                for l in 1..lanes {
                    let v = src[(o * lanes + l) * inner + i];
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = S::ZERO;
                for l in 0..lanes {
                    let idx = (o * lanes + l) * inner + i;
                    let e = (src[idx] - max).exp();
                    out[idx] = e;
                    sum += e;
                }
                for l in 0..lanes {
                    out[(o * lanes + l) * inner + i] /= sum;
                }
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::from_vec(shape, out)?, Op::Softmax(a.0, axis), "softmax", needs)
    }

    /// 2D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: sa,
                got: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(vec![m, n], out)?, Op::Matmul(a.0, b.0), "matmul", needs)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = permute(&self.nodes[a.0].value, axes)?;
        let needs = self.needs(a);
        self.push(value, Op::Permute(a.0, axes.to_vec()), "permute", needs)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        self.check(a)?;
        let value = self.nodes[a.0].value.reshaped(shape)?;
        let needs = self.needs(a);
        self.push(value, Op::Reshape(a.0), "reshape", needs)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                expected: vec![],
                got: vec![],
            });
        }
        for v in inputs {
            self.check(*v)?;
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: first.len(),
            });
        }
        let mut axis_total = 0usize;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    expected: first.clone(),
                    got: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![S::ZERO; out_shape.iter().product()];
        let mut offset = 0usize;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            let lanes = s[axis];
            let src = self.nodes[v.0].value.data();
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * lanes * inner;
                out[dst_start..dst_start + lanes * inner]
                    .copy_from_slice(&src[src_start..src_start + lanes * inner]);
            }
            offset += lanes;
        }
        let needs = inputs.iter().any(|v| self.needs(*v));
        let ids = inputs.iter().map(|v| v.0).collect();
        self.push(Tensor::from_vec(out_shape, out)?, Op::Concat(ids, axis), "concat", needs)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(k)?;
        if stride == 0 {
            return Err(TensorError::InvalidStride { stride });
        }
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sk = self.nodes[k.0].value.shape().to_vec();
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: sx,
                got: sk,
            });
        }
        let out_h = conv_out_size(sx[2], sk[2], stride, pad).ok_or(TensorError::NonExactConv {
            op: "conv2d",
            input: sx[2],
            kernel: sk[2],
            stride,
            pad,
        })?;
        let out_w = conv_out_size(sx[3], sk[3], stride, pad).ok_or(TensorError::NonExactConv {
            op: "conv2d",
            input: sx[3],
            kernel: sk[3],
            stride,
            pad,
        })?;
        let rec = Conv2dRec {
            input: x.0,
            kernel: k.0,
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
            out_h,
            out_w,
        };
        let out = conv2d_fwd(self.nodes[x.0].value.data(), self.nodes[k.0].value.data(), &rec.dims());
        let shape = vec![rec.batch, rec.out_ch, out_h, out_w];
        let needs = self.needs(x) || self.needs(k);
        self.push(Tensor::from_vec(shape, out)?, Op::Conv2d(rec), "conv2d", needs)
    }

    /// Adjoint of `conv2d` with the same kernel layout [F,C,kh,kw]:
    /// input [N,F,H,W] -> output [N,C,H',W'] with H' = (H-1)*stride - 2*pad + kh.
    pub fn conv2d_transpose(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(k)?;
        if stride == 0 {
            return Err(TensorError::InvalidStride { stride });
        }
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sk = self.nodes[k.0].value.shape().to_vec();
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                expected: sx,
                got: sk,
            });
        }
        let out_h = conv_transpose_out_size(sx[2], sk[2], stride, pad).ok_or(TensorError::NonExactConv {
            op: "conv2d_transpose",
            input: sx[2],
            kernel: sk[2],
            stride,
            pad,
        })?;
        let out_w = conv_transpose_out_size(sx[3], sk[3], stride, pad).ok_or(TensorError::NonExactConv {
            op: "conv2d_transpose",
            input: sx[3],
            kernel: sk[3],
            stride,
            pad,
        })?;
        // Dims are phrased in conv2d terms: the conv "input" is this op's output.
        let rec = Conv2dRec {
            input: x.0,
            kernel: k.0,
            batch: sx[0],
            in_ch: sk[1],
            in_h: out_h,
            in_w: out_w,
            out_ch: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
            out_h: sx[2],
            out_w: sx[3],
        };
        let out = conv2d_bwd_input(self.nodes[x.0].value.data(), self.nodes[k.0].value.data(), &rec.dims());
        let shape = vec![sx[0], sk[1], out_h, out_w];
        let needs = self.needs(x) || self.needs(k);
        self.push(
            Tensor::from_vec(shape, out)?,
            Op::ConvTranspose2d(rec),
            "conv2d_transpose",
            needs,
        )
    }

    /// Add a per-channel bias to axis 1 of a rank >= 2 tensor.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(b)?;
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                expected: sx,
                got: sb,
            });
        }
        let ch = sx[1];
        let inner: usize = sx[2..].iter().product();
        let bd = self.nodes[b.0].value.data().to_vec();
        let mut out = self.nodes[x.0].value.data().to_vec();
        for n in 0..sx[0] {
            for c in 0..ch {
                let start = (n * ch + c) * inner;
                let bv = bd[c];
                for v in &mut out[start..start + inner] {
                    *v += bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(Tensor::from_vec(sx, out)?, Op::BiasAdd(x.0, b.0), "bias_add", needs)
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        let sx = self.nodes[x.0].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_resize",
                expected: vec![0, 0, 0, 0],
                got: sx,
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let mut out = vec![S::ZERO; n * c * out_h * out_w];
        for plane in 0..n * c {
            resize_bilinear(
                &self.nodes[x.0].value.data()[plane * h * w..(plane + 1) * h * w],
                h,
                w,
                out_h,
                out_w,
                &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w],
            );
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(vec![n, c, out_h, out_w], out)?,
            Op::BilinearResize(x.0),
            "bilinear_resize",
            needs,
        )
    }

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let s: S = self.nodes[a.0].value.data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::ReduceSum(a.0), "reduce_sum", needs)
    }

    pub fn reduce_mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let n = self.nodes[a.0].value.numel();
        let s: S = self.nodes[a.0].value.data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(
            Tensor::scalar(s / S::from_f64(n as f64)),
            Op::ReduceMean(a.0),
            "reduce_mean",
            needs,
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mse", a, b)?;
        let n = self.nodes[a.0].value.numel();
        let mut acc = S::ZERO;
        for (x, y) in self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
        {
            let d = *x - *y;
            acc += d * d;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::scalar(acc / S::from_f64(n as f64)),
            Op::Mse(a.0, b.0),
            "mse",
            needs,
        )
    }

    /// KL(N(mu, e^logvar) || N(mu0, e^logvar0)) for diagonal Gaussians,
    /// averaged over elements.
    pub fn kl_diag_gaussians(
        &mut self,
        mu: Var,
        logvar: Var,
        mu0: Var,
        logvar0: Var,
    ) -> Result<Var, TensorError> {
        self.binary_same_shape("kl_diag_gaussians", mu, logvar)?;
        self.binary_same_shape("kl_diag_gaussians", mu, mu0)?;
        self.binary_same_shape("kl_diag_gaussians", mu, logvar0)?;
        let n = self.nodes[mu.0].value.numel();
        let half = S::from_f64(0.5);
        let mut acc = S::ZERO;
        for i in 0..n {
            let m = self.nodes[mu.0].value.data()[i];
            let lv = self.nodes[logvar.0].value.data()[i];
            let m0 = self.nodes[mu0.0].value.data()[i];
            let lv0 = self.nodes[logvar0.0].value.data()[i];
            let dm = m - m0;
            acc += half * (lv0 - lv + (lv.exp() + dm * dm) / lv0.exp() - S::ONE);
        }
        let needs =
            self.needs(mu) || self.needs(logvar) || self.needs(mu0) || self.needs(logvar0);
        self.push(
            Tensor::scalar(acc / S::from_f64(n as f64)),
            Op::KlGauss {
                mu: mu.0,
                logvar: logvar.0,
                mu0: mu0.0,
                logvar0: logvar0.0,
            },
            "kl_diag_gaussians",
            needs,
        )
    }

    /// KL against the standard normal.
    pub fn kl_diag_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var, TensorError> {
        let shape = self.value(mu)?.shape().to_vec();
        let z0 = self.constant(Tensor::zeros(&shape));
        let z1 = self.constant(Tensor::zeros(&shape));
        self.kl_diag_gaussians(mu, logvar, z0, z1)
    }

    /// L2-normalize each row of a [rows, cols] matrix. Rows with norm below
    /// a small epsilon divide by the epsilon instead, so a zero row stays zero.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        let shape = self.nodes[a.0].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row_l2_normalize",
                expected: vec![0, 0],
                got: shape,
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let eps = S::from_f64(NORMALIZE_EPS);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![S::ZERO; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| *v * *v).sum::<S>().sqrt().maxs(eps);
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = *v / norm;
            }
        }
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(shape, out)?,
            Op::RowNormalize(a.0),
            "row_l2_normalize",
            needs,
        )
    }

    /// Hard shrinkage with renormalization over each row of addressing
    /// weights: entries below `lambda` are zeroed and the survivors are
    /// rescaled to sum to one. If a row loses every entry, its argmax gets
    /// weight one.
    pub fn hard_shrink_renormalize(&mut self, w: Var, lambda: f64) -> Result<Var, TensorError> {
        self.check(w)?;
        let shape = self.nodes[w.0].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "hard_shrink_renormalize",
                expected: vec![0, 0],
                got: shape,
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let lam = S::from_f64(lambda);
        let src = self.nodes[w.0].value.data();
        let mut out = vec![S::ZERO; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let kept_sum: S = row.iter().filter(|v| **v >= lam).copied().sum();
            let dst = &mut out[r * cols..(r + 1) * cols];
            if kept_sum > S::ZERO {
                for (o, v) in dst.iter_mut().zip(row) {
                    *o = if *v >= lam { *v / kept_sum } else { S::ZERO };
                }
            } else {
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                dst[argmax] = S::ONE;
            }
        }
        let needs = self.needs(w);
        self.push(
            Tensor::from_vec(shape, out)?,
            Op::HardShrink(w.0, lambda),
            "hard_shrink_renormalize",
            needs,
        )
    }

    /// Propagate gradients from a scalar loss to every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.check(loss)?;
        {
            let t = &self.nodes[loss.0].value;
            if t.numel() != 1 {
                return Err(TensorError::NonScalarLoss {
                    shape: t.shape().to_vec(),
                });
            }
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::ONE));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_backward(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter()) {
            if let Some(g) = g {
                match &mut node.grad {
                    None => node.grad = Some(g),
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *c;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_backward(
        &self,
        i: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<(), TensorError> {
        let op = self.nodes[i].op.clone();
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.nodes[a].needs_grad {
                    accumulate(&mut grads[a], g.clone());
                }
                if self.nodes[b].needs_grad {
                    accumulate(&mut grads[b], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a].needs_grad {
                    accumulate(&mut grads[a], g.clone());
                }
                if self.nodes[b].needs_grad {
                    accumulate(&mut grads[b], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a].needs_grad {
                    let data: Vec<S> = gd
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(gv, bv)| *gv * *bv)
                        .collect();
                    accumulate(&mut grads[a], Tensor::from_vec(g.shape().to_vec(), data)?);
                }
                if self.nodes[b].needs_grad {
                    let data: Vec<S> = gd
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gv, av)| *gv * *av)
                        .collect();
                    accumulate(&mut grads[b], Tensor::from_vec(g.shape().to_vec(), data)?);
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a].needs_grad {
                    let cs = S::from_f64(c);
                    accumulate(&mut grads[a], g.map(|v| v * cs));
                }
            }
            Op::AddScalar(a) => {
                if self.nodes[a].needs_grad {
                    accumulate(&mut grads[a], g.clone());
                }
            }
            Op::Relu(a) => {
                if self.nodes[a].needs_grad {
                    let data: Vec<S> = gd
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gv, xv)| if *xv > S::ZERO { *gv } else { S::ZERO })
                        .collect();
                    accumulate(&mut grads[a], Tensor::from_vec(g.shape().to_vec(), data)?);
                }
            }
            Op::LeakyRelu(a, alpha) => {
                if self.nodes[a].needs_grad {
                    let al = S::from_f64(alpha);
                    let data: Vec<S> = gd
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gv, xv)| if *xv > S::ZERO { *gv } else { *gv * al })
                        .collect();
                    accumulate(&mut grads[a], Tensor::from_vec(g.shape().to_vec(), data)?);
                }
            }
            Op::Sigmoid(a) => {
                if self.nodes[a].needs_grad {
                    let data: Vec<S> = gd
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(gv, yv)| *gv * *yv * (S::ONE - *yv))
                        .collect();
                    accumulate(&mut grads[a], Tensor::from_vec(g.shape().to_vec(), data)?);
                }
            }
            Op::Tanh(a) => {
                if self.nodes[a].needs_grad {
                    let data: Vec<S> = gd
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(gv, yv)| *gv * (S::ONE - *yv * *yv))
                        .collect();
                    accumulate(&mut grads[a], Tensor::from_vec(g.shape().to_vec(), data)?);
                }
            }
            Op::Exp(a) => {
                if self.nodes[a].needs_grad {
                    let data: Vec<S> = gd
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(gv, yv)| *gv * *yv)
                        .collect();
                    accumulate(&mut grads[a], Tensor::from_vec(g.shape().to_vec(), data)?);
                }
            }
            Op::Log(a) => {
                if self.nodes[a].needs_grad {
                    let data: Vec<S> = gd
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gv, xv)| *gv / *xv)
                        .collect();
                    accumulate(&mut grads[a], Tensor::from_vec(g.shape().to_vec(), data)?);
                }
            }
            Op::Softmax(a, axis) => {
                if self.nodes[a].needs_grad {
                    let y = self.nodes[i].value.data();
                    let shape = self.nodes[i].value.shape();
                    let lanes = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut dx = vec![S::ZERO; y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let mut dot = S::ZERO;
                            for l in 0..lanes {
                                let idx = (o * lanes + l) * inner + ii;
                                dot += gd[idx] * y[idx];
                            }
                            for l in 0..lanes {
                                let idx = (o * lanes + l) * inner + ii;
                                dx[idx] = y[idx] * (gd[idx] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[a], Tensor::from_vec(shape.to_vec(), dx)?);
                }
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a].value.shape();
                let sb = self.nodes[b].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a].needs_grad {
                    // dA = g @ B^T
                    let bd = self.nodes[b].value.data();
                    let mut da = vec![S::ZERO; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = S::ZERO;
                            for j in 0..n {
                                acc += gd[r * n + j] * bd[p * n + j];
                            }
                            da[r * k + p] = acc;
                        }
                    }
                    accumulate(&mut grads[a], Tensor::from_vec(vec![m, k], da)?);
                }
                if self.nodes[b].needs_grad {
                    // dB = A^T @ g
                    let ad = self.nodes[a].value.data();
                    let mut db = vec![S::ZERO; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            let row = &mut db[p * n..(p + 1) * n];
                            for (slot, gv) in row.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                                *slot += av * *gv;
                            }
                        }
                    }
                    accumulate(&mut grads[b], Tensor::from_vec(vec![k, n], db)?);
                }
            }
            Op::Permute(a, axes) => {
                if self.nodes[a].needs_grad {
                    let inv = invert_axes(&axes);
                    accumulate(&mut grads[a], permute(g, &inv)?);
                }
            }
            Op::Reshape(a) => {
                if self.nodes[a].needs_grad {
                    let shape = self.nodes[a].value.shape().to_vec();
                    accumulate(&mut grads[a], g.reshaped(shape)?);
                }
            }
            Op::Concat(inputs, axis) => {
                let out_shape = self.nodes[i].value.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0usize;
                for a in inputs {
                    let s = self.nodes[a].value.shape().to_vec();
                    let lanes = s[axis];
                    if self.nodes[a].needs_grad {
                        let mut part = vec![S::ZERO; s.iter().product()];
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            let dst_start = o * lanes * inner;
                            part[dst_start..dst_start + lanes * inner]
                                .copy_from_slice(&gd[src_start..src_start + lanes * inner]);
                        }
                        accumulate(&mut grads[a], Tensor::from_vec(s, part)?);
                    }
                    offset += lanes;
                }
            }
            Op::Conv2d(rec) => {
                let dims = rec.dims();
                if self.nodes[rec.input].needs_grad {
                    let dx = conv2d_bwd_input(gd, self.nodes[rec.kernel].value.data(), &dims);
                    accumulate(
                        &mut grads[rec.input],
                        Tensor::from_vec(self.nodes[rec.input].value.shape().to_vec(), dx)?,
                    );
                }
                if self.nodes[rec.kernel].needs_grad {
                    let dk = conv2d_bwd_kernel(gd, self.nodes[rec.input].value.data(), &dims);
                    accumulate(
                        &mut grads[rec.kernel],
                        Tensor::from_vec(self.nodes[rec.kernel].value.shape().to_vec(), dk)?,
                    );
                }
            }
            Op::ConvTranspose2d(rec) => {
                let dims = rec.dims();
                if self.nodes[rec.input].needs_grad {
                    let dx = conv2d_fwd(gd, self.nodes[rec.kernel].value.data(), &dims);
                    accumulate(
                        &mut grads[rec.input],
                        Tensor::from_vec(self.nodes[rec.input].value.shape().to_vec(), dx)?,
                    );
                }
                if self.nodes[rec.kernel].needs_grad {
                    let dk = conv2d_bwd_kernel(self.nodes[rec.input].value.data(), gd, &dims);
                    accumulate(
                        &mut grads[rec.kernel],
                        Tensor::from_vec(self.nodes[rec.kernel].value.shape().to_vec(), dk)?,
                    );
                }
            }
            Op::BiasAdd(x, b) => {
                if self.nodes[x].needs_grad {
                    accumulate(&mut grads[x], g.clone());
                }
                if self.nodes[b].needs_grad {
                    let sx = self.nodes[x].value.shape();
                    let ch = sx[1];
                    let inner: usize = sx[2..].iter().product();
                    let mut db = vec![S::ZERO; ch];
                    for n in 0..sx[0] {
                        for c in 0..ch {
                            let start = (n * ch + c) * inner;
                            let mut acc = S::ZERO;
                            for v in &gd[start..start + inner] {
                                acc += *v;
                            }
                            db[c] += acc;
                        }
                    }
                    accumulate(&mut grads[b], Tensor::from_vec(vec![ch], db)?);
                }
            }
            Op::BilinearResize(a) => {
                if self.nodes[a].needs_grad {
                    let sx = self.nodes[a].value.shape().to_vec();
                    let so = self.nodes[i].value.shape();
                    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (oh, ow) = (so[2], so[3]);
                    let mut dx = vec![S::ZERO; n * c * h * w];
                    for plane in 0..n * c {
                        resize_bilinear_adjoint(
                            &gd[plane * oh * ow..(plane + 1) * oh * ow],
                            oh,
                            ow,
                            h,
                            w,
                            &mut dx[plane * h * w..(plane + 1) * h * w],
                        );
                    }
                    accumulate(&mut grads[a], Tensor::from_vec(sx, dx)?);
                }
            }
            Op::ReduceSum(a) => {
                if self.nodes[a].needs_grad {
                    let gv = gd[0];
                    let shape = self.nodes[a].value.shape().to_vec();
                    accumulate(&mut grads[a], Tensor::full(&shape, gv));
                }
            }
            Op::ReduceMean(a) => {
                if self.nodes[a].needs_grad {
                    let n = self.nodes[a].value.numel();
                    let gv = gd[0] / S::from_f64(n as f64);
                    let shape = self.nodes[a].value.shape().to_vec();
                    accumulate(&mut grads[a], Tensor::full(&shape, gv));
                }
            }
            Op::Mse(a, b) => {
                let n = self.nodes[a].value.numel();
                let scale = S::from_f64(2.0 / n as f64) * gd[0];
                if self.nodes[a].needs_grad || self.nodes[b].needs_grad {
                    let diff: Vec<S> = self.nodes[a]
                        .value
                        .data()
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(x, y)| (*x - *y) * scale)
                        .collect();
                    if self.nodes[a].needs_grad {
                        accumulate(
                            &mut grads[a],
                            Tensor::from_vec(self.nodes[a].value.shape().to_vec(), diff.clone())?,
                        );
                    }
                    if self.nodes[b].needs_grad {
                        let neg: Vec<S> = diff.iter().map(|v| -*v).collect();
                        accumulate(
                            &mut grads[b],
                            Tensor::from_vec(self.nodes[b].value.shape().to_vec(), neg)?,
                        );
                    }
                }
            }
            Op::KlGauss {
                mu,
                logvar,
                mu0,
                logvar0,
            } => {
                let n = self.nodes[mu].value.numel();
                let inv_n = S::from_f64(1.0 / n as f64) * gd[0];
                let half = S::from_f64(0.5);
                let md = self.nodes[mu].value.data();
                let lvd = self.nodes[logvar].value.data();
                let m0d = self.nodes[mu0].value.data();
                let lv0d = self.nodes[logvar0].value.data();
                let shape = self.nodes[mu].value.shape().to_vec();
                if self.nodes[mu].needs_grad {
                    let data: Vec<S> = (0..n)
                        .map(|j| (md[j] - m0d[j]) / lv0d[j].exp() * inv_n)
                        .collect();
                    accumulate(&mut grads[mu], Tensor::from_vec(shape.clone(), data)?);
                }
                if self.nodes[logvar].needs_grad {
                    let data: Vec<S> = (0..n)
                        .map(|j| half * (lvd[j].exp() / lv0d[j].exp() - S::ONE) * inv_n)
                        .collect();
                    accumulate(&mut grads[logvar], Tensor::from_vec(shape.clone(), data)?);
                }
                if self.nodes[mu0].needs_grad {
                    let data: Vec<S> = (0..n)
                        .map(|j| -(md[j] - m0d[j]) / lv0d[j].exp() * inv_n)
                        .collect();
                    accumulate(&mut grads[mu0], Tensor::from_vec(shape.clone(), data)?);
                }
                if self.nodes[logvar0].needs_grad {
                    let data: Vec<S> = (0..n)
                        .map(|j| {
                            let dm = md[j] - m0d[j];
                            half * (S::ONE - (lvd[j].exp() + dm * dm) / lv0d[j].exp()) * inv_n
                        })
                        .collect();
                    accumulate(&mut grads[logvar0], Tensor::from_vec(shape, data)?);
                }
            }
            Op::RowNormalize(a) => {
                if self.nodes[a].needs_grad {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let (rows, cols) = (shape[0], shape[1]);
                    let eps = S::from_f64(NORMALIZE_EPS);
                    let x = self.nodes[a].value.data();
                    let y = self.nodes[i].value.data();
                    let mut dx = vec![S::ZERO; rows * cols];
                    for r in 0..rows {
                        let xr = &x[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let norm = xr.iter().map(|v| *v * *v).sum::<S>().sqrt();
                        let slot = &mut dx[r * cols..(r + 1) * cols];
                        if norm > eps {
                            let dot: S = gr.iter().zip(yr).map(|(gv, yv)| *gv * *yv).sum();
                            for ((dv, gv), yv) in slot.iter_mut().zip(gr).zip(yr) {
                                *dv = (*gv - *yv * dot) / norm;
                            }
                        } else {
                            for (dv, gv) in slot.iter_mut().zip(gr) {
                                *dv = *gv / eps;
                            }
                        }
                    }
                    accumulate(&mut grads[a], Tensor::from_vec(shape, dx)?);
                }
            }
            Op::HardShrink(a, lambda) => {
                if self.nodes[a].needs_grad {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let (rows, cols) = (shape[0], shape[1]);
                    let lam = S::from_f64(lambda);
                    let w = self.nodes[a].value.data();
                    let y = self.nodes[i].value.data();
                    let mut dw = vec![S::ZERO; rows * cols];
                    for r in 0..rows {
                        let wr = &w[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let kept_sum: S = wr.iter().filter(|v| **v >= lam).copied().sum();
                        if kept_sum > S::ZERO {
                            let dot: S = gr.iter().zip(yr).map(|(gv, yv)| *gv * *yv).sum();
                            let slot = &mut dw[r * cols..(r + 1) * cols];
                            for ((dv, gv), wv) in slot.iter_mut().zip(gr).zip(wr) {
                                if *wv >= lam {
                                    *dv = (*gv - dot) / kept_sum;
                                }
                            }
                        }
                        // All-shrunk rows output a constant one-hot: zero gradient.
                    }
                    accumulate(&mut grads[a], Tensor::from_vec(shape, dw)?);
                }
            }
        }
        Ok(())
    }
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (slot, bv) in orow.iter_mut().zip(brow) {
                *slot += av * *bv;
            }
        }
    }
    out
}
