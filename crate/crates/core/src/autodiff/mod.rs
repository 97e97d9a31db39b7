//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward evaluation together with
//! the values it produced. [`Tape::backward`] walks the record in reverse and
//! applies each operation's vector-Jacobian product. The operation set is a
//! closed enum, so every operation that can appear on a tape has a backward
//! rule by construction.
//!
//! Parameters enter a tape through a [`Binding`], which registers each tensor
//! of a [`ParamSet`] once. A parameter that is read by several operations, as
//! the shared weights of a bidirectional layer are by the encode and the
//! decode pass, therefore receives the sum of all path contributions.

mod gradcheck;
mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Binding, Gradients, ParamId, ParamSet};

use crate::error::{Error, Result};
use crate::layers::GNova;
use crate::tensor::{matmul_ex, ConvGeometry, Scalar, Tensor};

/// Index of a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Offset { x: Var },
    AddConst { x: Var },
    Reshape { x: Var },
    Conv2d { x: Var, kernel: Var, geom: ConvGeometry },
    ConvTranspose2d { y: Var, kernel: Var, geom: ConvGeometry },
    GNova { x: Var, act: GNova },
    Sigmoid { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    Reparam { mu: Var, logvar: Var, eps: Tensor<T> },
    RepeatRows { x: Var, times: usize },
    SumAll { x: Var },
    SumAxis { x: Var, dims: AxisDims },
    LogSumExpAxis { x: Var, dims: AxisDims },
    KlStdNormal { mu: Var, logvar: Var },
    BceLogits { logits: Var, target: Tensor<T> },
    StdNormalLogPdf { z: Var },
    GaussLogPdf { z: Var, mu: Var, logvar: Var },
    PairwiseGaussLogPdf { z: Var, mu: Var, logvar: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Offset { .. } => "offset",
            Op::AddConst { .. } => "add_const",
            Op::Reshape { .. } => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::GNova { .. } => "gnova",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::Reparam { .. } => "reparameterize",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::SumAll { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::LogSumExpAxis { .. } => "logsumexp_axis",
            Op::KlStdNormal { .. } => "kl_std_normal",
            Op::BceLogits { .. } => "bce_logits",
            Op::StdNormalLogPdf { .. } => "std_normal_log_pdf",
            Op::GaussLogPdf { .. } => "gauss_log_pdf",
            Op::PairwiseGaussLogPdf { .. } => "pairwise_gauss_log_pdf",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }
}

/// `(outer, len, inner)` decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisDims {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisDims {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Record of one forward evaluation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `max(s,0) − s·t + ln(1 + e^{−|s|})`: binary cross-entropy of target `t`
/// under Bernoulli logit `s`.
pub(crate) fn bce_with_logits<T: Scalar>(s: T, t: T) -> T {
    s.max(T::zero()) - s * t + (-s.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let value = value.ensure_finite(op.name())?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · b` or `a · bᵀ` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = matmul_ex(self.value(a), false, self.value(b), trans_b)?;
        self.push(out, Op::MatMul { a, b, trans_b })
    }

    /// Adds `bias[c]` along axis 1 (features of `[B, n]`, channels of `[B, C, H, W]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.ndim() < 2 || bv.numel() != xv.shape()[1] {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let d = AxisDims::of(xv.shape(), 1);
        let mut out = xv.clone();
        let b = bv.data();
        for o in 0..d.outer {
            for (c, &bc) in b.iter().enumerate().take(d.len) {
                let base = (o * d.len + c) * d.inner;
                for v in &mut out.data_mut()[base..base + d.inner] {
                    *v = *v + bc;
                }
            }
        }
        self.push(out, Op::AddBias { x, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).scale(factor);
        self.push(out, Op::Scale { x, factor })
    }

    /// Adds a scalar constant.
    pub fn offset(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::Offset { x })
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let out = self.value(x).add(c)?;
        self.push(out, Op::AddConst { x })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape { x })
    }

    /// Batched convolution; `x` is `[B, C_in, H, W]` matching `geom`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let b = batch_of(xv, [geom.c_in, geom.in_h, geom.in_w], "conv2d")?;
        if kv.shape() != geom.kernel_shape() {
            return Err(Error::shape("conv2d", kv.shape(), &geom.kernel_shape()));
        }
        let out = Tensor::new(
            vec![b, geom.c_out, geom.out_h, geom.out_w],
            geom.forward(xv.data(), b, kv.data()),
        )?;
        self.push(out, Op::Conv2d { x, kernel, geom })
    }

    /// Batched transposed convolution back to `geom`'s recorded input extents.
    pub fn conv2d_transpose(&mut self, y: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        let yv = self.value(y);
        let kv = self.value(kernel);
        let b = batch_of(yv, [geom.c_out, geom.out_h, geom.out_w], "conv2d_transpose")?;
        if kv.shape() != geom.kernel_shape() {
            return Err(Error::shape("conv2d_transpose", kv.shape(), &geom.kernel_shape()));
        }
        let out = Tensor::new(
            vec![b, geom.c_in, geom.in_h, geom.in_w],
            geom.transpose(yv.data(), b, kv.data()),
        )?;
        self.push(out, Op::ConvTranspose2d { y, kernel, geom })
    }

    pub fn gnova(&mut self, x: Var, act: GNova) -> Result<Var> {
        let out = self.value(x).map(|v| act.apply(v));
        self.push(out, Op::GNova { x, act })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// `z = μ + ε·exp(logvar/2)` with `ε` held constant.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: Tensor<T>) -> Result<Var> {
        let m = self.value(mu);
        let lv = self.value(logvar);
        m.same_shape(lv, "reparameterize")?;
        m.same_shape(&eps, "reparameterize")?;
        let half = T::lit(0.5);
        let data = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((&m, &l), &e)| m + e * (l * half).exp())
            .collect();
        let out = Tensor::new(m.shape().to_vec(), data)?;
        self.push(out, Op::Reparam { mu, logvar, eps })
    }

    /// Repeats every leading-axis row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        let idx: Vec<usize> = (0..xv.rows()).flat_map(|i| std::iter::repeat_n(i, times)).collect();
        let out = xv.select_rows(&idx)?;
        self.push(out, Op::RepeatRows { x, times })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll { x })
    }

    /// Mean over all entries.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, T::lit(1.0 / n as f64))
    }

    fn reduce_shape(&self, x: Var, axis: usize, op: &'static str) -> Result<(AxisDims, Vec<usize>)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::shape(op, shape, &[axis]));
        }
        let mut out = shape.to_vec();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        Ok((AxisDims::of(shape, axis), out))
    }

    /// Sums over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (d, shape) = self.reduce_shape(x, axis, "sum_axis")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); d.outer * d.inner];
        for o in 0..d.outer {
            for l in 0..d.len {
                let src = &xv[(o * d.len + l) * d.inner..(o * d.len + l + 1) * d.inner];
                for (acc, &v) in out[o * d.inner..(o + 1) * d.inner].iter_mut().zip(src) {
                    *acc = *acc + v;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::SumAxis { x, dims: d })
    }

    /// Numerically stable `ln Σ exp(·)` over one axis, removing it.
    pub fn logsumexp_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (d, shape) = self.reduce_shape(x, axis, "logsumexp_axis")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); d.outer * d.inner];
        for o in 0..d.outer {
            for i in 0..d.inner {
                let at = |l: usize| xv[(o * d.len + l) * d.inner + i];
                let m = (0..d.len).map(at).fold(T::neg_infinity(), T::max);
                let s = (0..d.len).fold(T::zero(), |acc, l| acc + (at(l) - m).exp());
                out[o * d.inner + i] = m + s.ln();
            }
        }
        self.push(Tensor::new(shape, out)?, Op::LogSumExpAxis { x, dims: d })
    }

    /// Elementwise `½(μ² + e^{lv} − 1 − lv)`, the per-coordinate KL divergence
    /// of `N(μ, e^{lv})` from `N(0, 1)`.
    pub fn kl_std_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let half = T::lit(0.5);
        let out = self.value(mu).zip_map(self.value(logvar), "kl_std_normal", |m, l| {
            half * (m * m + l.exp() - T::one() - l)
        })?;
        self.push(out, Op::KlStdNormal { mu, logvar })
    }

    /// Elementwise Bernoulli negative log-likelihood of `target` under logits.
    pub fn bce_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != target.numel() {
            return Err(Error::shape("bce_logits", lv.shape(), target.shape()));
        }
        let data = lv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&s, &t)| bce_with_logits(s, t))
            .collect();
        let out = Tensor::new(lv.shape().to_vec(), data)?;
        let target = target.reshape(lv.shape().to_vec())?;
        self.push(out, Op::BceLogits { logits, target })
    }

    /// Elementwise `ln N(z; 0, 1)`.
    pub fn std_normal_log_pdf(&mut self, z: Var) -> Result<Var> {
        let c = T::lit(HALF_LN_2PI);
        let half = T::lit(0.5);
        let out = self.value(z).map(|v| -half * v * v - c);
        self.push(out, Op::StdNormalLogPdf { z })
    }

    /// Elementwise `ln N(z; μ, e^{lv})`.
    pub fn gauss_log_pdf(&mut self, z: Var, mu: Var, logvar: Var) -> Result<Var> {
        let (zv, mv, lv) = (self.value(z), self.value(mu), self.value(logvar));
        zv.same_shape(mv, "gauss_log_pdf")?;
        zv.same_shape(lv, "gauss_log_pdf")?;
        let data = (0..zv.numel())
            .map(|i| gauss_log_pdf(zv.data()[i], mv.data()[i], lv.data()[i]))
            .collect();
        let out = Tensor::new(zv.shape().to_vec(), data)?;
        self.push(out, Op::GaussLogPdf { z, mu, logvar })
    }

    /// `out[i, j, d] = ln N(z[i, d]; μ[j, d], e^{lv[j, d]})` for `z: [B, J]` and
    /// `μ, lv: [M, J]`.
    pub fn pairwise_gauss_log_pdf(&mut self, z: Var, mu: Var, logvar: Var) -> Result<Var> {
        let (zv, mv, lv) = (self.value(z), self.value(mu), self.value(logvar));
        let (b, j) = zv.dims2("pairwise_gauss_log_pdf")?;
        let (m, j2) = mv.dims2("pairwise_gauss_log_pdf")?;
        mv.same_shape(lv, "pairwise_gauss_log_pdf")?;
        if j != j2 {
            return Err(Error::shape("pairwise_gauss_log_pdf", zv.shape(), mv.shape()));
        }
        let mut out = Vec::with_capacity(b * m * j);
        for i in 0..b {
            for k in 0..m {
                for d in 0..j {
                    out.push(gauss_log_pdf(
                        zv.data()[i * j + d],
                        mv.data()[k * j + d],
                        lv.data()[k * j + d],
                    ));
                }
            }
        }
        let out = Tensor::new(vec![b, m, j], out)?;
        self.push(out, Op::PairwiseGaussLogPdf { z, mu, logvar })
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.dims2("softmax_cross_entropy")?;
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(Error::contract(format!(
                "{} labels for {b} rows of {c} classes",
                labels.len()
            )));
        }
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv.data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln();
            total = total + lse - row[y];
        }
        let out = Tensor::scalar(total / T::lit(b as f64));
        self.push(
            out,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// parameter registered on this tape; parameters the loss does not reach
    /// get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient at node {i} ({})", node.op.name()),
                });
            }
            if let Op::Param(id) = node.op {
                out.insert_or_add(id, g)?;
                continue;
            }
            for (input, contribution) in self.vjp(i, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                if out.get(id).is_none() {
                    out.insert_or_add(id, Tensor::zeros(node.value.shape().to_vec()))?;
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian product of node `i` for output cotangent `g`.
    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let half = T::lit(0.5);
        Ok(match &node.op {
            Op::Constant | Op::Param(_) => vec![],
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(a), val(b));
                if trans_b {
                    vec![
                        (a, matmul_ex(g, false, bv, false)?),
                        (b, matmul_ex(g, true, av, false)?),
                    ]
                } else {
                    vec![(a, matmul_ex(g, false, bv, true)?), (b, matmul_ex(av, true, g, false)?)]
                }
            }
            &Op::AddBias { x, bias } => {
                let d = AxisDims::of(g.shape(), 1);
                let mut gb = vec![T::zero(); d.len];
                for o in 0..d.outer {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        let base = (o * d.len + c) * d.inner;
                        *acc = g.data()[base..base + d.inner].iter().fold(*acc, |s, &v| s + v);
                    }
                }
                vec![(x, g.clone()), (bias, Tensor::new(val(bias).shape().to_vec(), gb)?)]
            }
            &Op::Add { a, b } => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub { a, b } => vec![(a, g.clone()), (b, g.scale(-T::one()))],
            &Op::Mul { a, b } => vec![
                (a, g.zip_map(val(b), "mul", |g, y| g * y)?),
                (b, g.zip_map(val(a), "mul", |g, x| g * x)?),
            ],
            &Op::Scale { x, factor } => vec![(x, g.scale(factor))],
            &Op::Offset { x } | &Op::AddConst { x } => vec![(x, g.clone())],
            &Op::Reshape { x } => vec![(x, g.reshape(val(x).shape().to_vec())?)],
            &Op::Conv2d { x, kernel, geom } => {
                let b = g.numel() / geom.output_len();
                vec![
                    (
                        x,
                        Tensor::new(val(x).shape().to_vec(), geom.transpose(g.data(), b, val(kernel).data()))?,
                    ),
                    (
                        kernel,
                        Tensor::new(
                            geom.kernel_shape().to_vec(),
                            geom.kernel_grad(val(x).data(), g.data(), b),
                        )?,
                    ),
                ]
            }
            &Op::ConvTranspose2d { y, kernel, geom } => {
                let b = g.numel() / geom.input_len();
                vec![
                    (
                        y,
                        Tensor::new(val(y).shape().to_vec(), geom.forward(g.data(), b, val(kernel).data()))?,
                    ),
                    (
                        kernel,
                        Tensor::new(
                            geom.kernel_shape().to_vec(),
                            geom.kernel_grad(g.data(), val(y).data(), b),
                        )?,
                    ),
                ]
            }
            &Op::GNova { x, act } => {
                vec![(x, g.zip_map(val(x), "gnova", |g, x| g * act.derivative(x))?)]
            }
            &Op::Sigmoid { x } => {
                vec![(x, g.zip_map(out, "sigmoid", |g, s| g * s * (T::one() - s))?)]
            }
            &Op::Clamp { x, lo, hi } => vec![(
                x,
                g.zip_map(val(x), "clamp", |g, x| if x >= lo && x <= hi { g } else { T::zero() })?,
            )],
            Op::Reparam { mu, logvar, eps } => {
                let lv = val(*logvar);
                let glv = (0..g.numel())
                    .map(|k| g.data()[k] * eps.data()[k] * half * (lv.data()[k] * half).exp())
                    .collect();
                vec![(*mu, g.clone()), (*logvar, Tensor::new(lv.shape().to_vec(), glv)?)]
            }
            &Op::RepeatRows { x, times } => {
                let xv = val(x);
                let n = xv.row_len();
                let mut acc = vec![T::zero(); xv.numel()];
                for (r, row) in g.data().chunks(n.max(1)).enumerate() {
                    let dst = &mut acc[(r / times) * n..(r / times + 1) * n];
                    for (a, &v) in dst.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                vec![(x, Tensor::new(xv.shape().to_vec(), acc)?)]
            }
            &Op::SumAll { x } => vec![(x, Tensor::full(val(x).shape().to_vec(), g.data()[0]))],
            &Op::SumAxis { x, dims: d } => {
                let mut gx = vec![T::zero(); d.outer * d.len * d.inner];
                for o in 0..d.outer {
                    for l in 0..d.len {
                        let dst = &mut gx[(o * d.len + l) * d.inner..(o * d.len + l + 1) * d.inner];
                        dst.copy_from_slice(&g.data()[o * d.inner..(o + 1) * d.inner]);
                    }
                }
                vec![(x, Tensor::new(val(x).shape().to_vec(), gx)?)]
            }
            &Op::LogSumExpAxis { x, dims: d } => {
                let xv = val(x).data();
                let mut gx = vec![T::zero(); xv.len()];
                for o in 0..d.outer {
                    for l in 0..d.len {
                        for k in 0..d.inner {
                            let at = (o * d.len + l) * d.inner + k;
                            let r = o * d.inner + k;
                            gx[at] = g.data()[r] * (xv[at] - out.data()[r]).exp();
                        }
                    }
                }
                vec![(x, Tensor::new(val(x).shape().to_vec(), gx)?)]
            }
            &Op::KlStdNormal { mu, logvar } => vec![
                (mu, g.zip_map(val(mu), "kl", |g, m| g * m)?),
                (
                    logvar,
                    g.zip_map(val(logvar), "kl", |g, l| g * half * (l.exp() - T::one()))?,
                ),
            ],
            Op::BceLogits { logits, target } => {
                let s = val(*logits);
                let gs = (0..g.numel())
                    .map(|k| g.data()[k] * (sigmoid(s.data()[k]) - target.data()[k]))
                    .collect();
                vec![(*logits, Tensor::new(s.shape().to_vec(), gs)?)]
            }
            &Op::StdNormalLogPdf { z } => vec![(z, g.zip_map(val(z), "std_normal", |g, z| -g * z)?)],
            &Op::GaussLogPdf { z, mu, logvar } => {
                let (zv, mv, lv) = (val(z).data(), val(mu).data(), val(logvar).data());
                let n = g.numel();
                let (mut gz, mut gm, mut gl) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
                for k in 0..n {
                    let (dz, dm, dl) = gauss_log_pdf_grad(zv[k], mv[k], lv[k]);
                    gz[k] = g.data()[k] * dz;
                    gm[k] = g.data()[k] * dm;
                    gl[k] = g.data()[k] * dl;
                }
                let shape = g.shape().to_vec();
                vec![
                    (z, Tensor::new(shape.clone(), gz)?),
                    (mu, Tensor::new(shape.clone(), gm)?),
                    (logvar, Tensor::new(shape, gl)?),
                ]
            }
            &Op::PairwiseGaussLogPdf { z, mu, logvar } => {
                let (zv, mv, lv) = (val(z), val(mu), val(logvar));
                let (b, j) = (zv.shape()[0], zv.shape()[1]);
                let m = mv.shape()[0];
                let (mut gz, mut gm, mut gl) = (vec![T::zero(); b * j], vec![T::zero(); m * j], vec![T::zero(); m * j]);
                for i in 0..b {
                    for k in 0..m {
                        for d in 0..j {
                            let gv = g.data()[(i * m + k) * j + d];
                            let (dz, dm, dl) =
                                gauss_log_pdf_grad(zv.data()[i * j + d], mv.data()[k * j + d], lv.data()[k * j + d]);
                            gz[i * j + d] = gz[i * j + d] + gv * dz;
                            gm[k * j + d] = gm[k * j + d] + gv * dm;
                            gl[k * j + d] = gl[k * j + d] + gv * dl;
                        }
                    }
                }
                vec![
                    (z, Tensor::new(zv.shape().to_vec(), gz)?),
                    (mu, Tensor::new(mv.shape().to_vec(), gm)?),
                    (logvar, Tensor::new(lv.shape().to_vec(), gl)?),
                ]
            }
            Op::SoftmaxXent { logits, labels } => {
                let lv = val(*logits);
                let (b, c) = (lv.shape()[0], lv.shape()[1]);
                let scale = g.data()[0] / T::lit(b as f64);
                let mut gl = vec![T::zero(); b * c];
                for (i, &y) in labels.iter().enumerate() {
                    let row = &lv.data()[i * c..(i + 1) * c];
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
                    for k in 0..c {
                        let p = (row[k] - m).exp() / z;
                        let onehot = if k == y { T::one() } else { T::zero() };
                        gl[i * c + k] = scale * (p - onehot);
                    }
                }
                vec![(*logits, Tensor::new(lv.shape().to_vec(), gl)?)]
            }
        })
    }
}

fn batch_of<T: Scalar>(x: &Tensor<T>, chw: [usize; 3], op: &'static str) -> Result<usize> {
    match *x.shape() {
        [b, c, h, w] if [c, h, w] == chw => Ok(b),
        _ => Err(Error::shape(op, x.shape(), &chw)),
    }
}

pub(crate) fn gauss_log_pdf<T: Scalar>(z: T, mu: T, logvar: T) -> T {
    let d = z - mu;
    -T::lit(0.5) * (d * d * (-logvar).exp() + logvar) - T::lit(HALF_LN_2PI)
}

/// Partials of `gauss_log_pdf` with respect to `(z, μ, logvar)`.
fn gauss_log_pdf_grad<T: Scalar>(z: T, mu: T, logvar: T) -> (T, T, T) {
    let half = T::lit(0.5);
    let inv = (-logvar).exp();
    let d = z - mu;
    (-d * inv, d * inv, half * (d * d * inv - T::one()))
}
