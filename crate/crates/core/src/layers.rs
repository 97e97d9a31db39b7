//! Bidirectional layers: one weight block per layer, applied as-is on the
//! forward (encoding) pass and transposed on the reverse (decoding) pass.
//!
//! Each direction carries its own bias. A layer can also be built for a single
//! direction, which is how the unidirectional twin's encoder and decoder
//! networks are assembled from the same primitives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Binding, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{ConvGeometry, Scalar, Tensor};

/// Generalized nonvanishing activation `a(x) = αx + x·σ(βx)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GNova {
    alpha: f64,
    beta: f64,
}

impl Default for GNova {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl GNova {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::config(format!(
                "G-NoVa needs alpha > 0 and beta > 0, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn apply<T: Scalar>(&self, x: T) -> T {
        let (a, b) = (T::lit(self.alpha), T::lit(self.beta));
        a * x + x * sigmoid(b * x)
    }

    /// `α + σ(βx) + βx·σ(βx)(1 − σ(βx))`.
    pub fn derivative<T: Scalar>(&self, x: T) -> T {
        let (a, b) = (T::lit(self.alpha), T::lit(self.beta));
        let s = sigmoid(b * x);
        a + s + b * x * s * (T::one() - s)
    }
}

/// Which directions a layer is built for. Bias tensors exist only for the
/// directions that are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Directions {
    Both,
    ForwardOnly,
    ReverseOnly,
}

impl Directions {
    fn forward(self) -> bool {
        matches!(self, Directions::Both | Directions::ForwardOnly)
    }

    fn reverse(self) -> bool {
        matches!(self, Directions::Both | Directions::ReverseOnly)
    }
}

/// Tunable-scalar counts.
///
/// `weights` covers the weight tensors of the encode/decode network (trunk and
/// mean head). The forward-only log-variance head is reported separately in
/// `logvar_weights` because it has no decode counterpart. `total` is the sum
/// of all three fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub weights: usize,
    pub logvar_weights: usize,
    pub biases: usize,
    pub total: usize,
}

impl ParamCount {
    fn new(weights: usize, biases: usize) -> Self {
        Self {
            weights,
            logvar_weights: 0,
            biases,
            total: weights + biases,
        }
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;

    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            weights: self.weights + o.weights,
            logvar_weights: self.logvar_weights + o.logvar_weights,
            biases: self.biases + o.biases,
            total: self.total + o.total,
        }
    }
}

impl std::iter::Sum for ParamCount {
    fn sum<I: Iterator<Item = ParamCount>>(iter: I) -> Self {
        iter.fold(ParamCount::default(), |a, b| a + b)
    }
}

/// Uniform on `±√(6 / (fan_in + fan_out))`.
pub fn init_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut RngState) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit((2.0 * rng.uniform() - 1.0) * bound))
}

fn apply_act<T: Scalar>(tape: &mut Tape<T>, x: Var, act: Option<GNova>) -> Result<Var> {
    match act {
        Some(a) => tape.gnova(x, a),
        None => Ok(x),
    }
}

fn bias_param<T: Scalar>(params: &mut ParamSet<T>, name: String, len: usize, wanted: bool) -> Result<Option<ParamId>> {
    if wanted {
        Ok(Some(params.add(name, Tensor::zeros(vec![len]))?))
    } else {
        Ok(None)
    }
}

fn add_opt_bias<T: Scalar>(tape: &mut Tape<T>, b: &Binding, x: Var, bias: Option<ParamId>) -> Result<Var> {
    match bias {
        Some(id) => tape.add_bias(x, b[id]),
        None => Ok(x),
    }
}

fn direction_error(layer: &str, dir: &str) -> Error {
    Error::contract(format!("{layer} was not built for the {dir} direction"))
}

/// Dense layer `W: [n_out × n_in]`. Forward: `act(W·x + b_fwd)`; reverse:
/// `act(Wᵀ·h + b_rev)`.
#[derive(Clone, Debug)]
pub struct BiDense {
    pub w: ParamId,
    pub b_fwd: Option<ParamId>,
    pub b_rev: Option<ParamId>,
    pub n_in: usize,
    pub n_out: usize,
    pub fwd_act: Option<GNova>,
    pub rev_act: Option<GNova>,
}

impl BiDense {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        dirs: Directions,
        fwd_act: Option<GNova>,
        rev_act: Option<GNova>,
        rng: &mut RngState,
    ) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::ShapeConfig(format!("dense {n_in} -> {n_out}")));
        }
        let w = params.add(format!("{name}.w"), init_uniform(vec![n_out, n_in], n_in, n_out, rng))?;
        Ok(Self {
            w,
            b_fwd: bias_param(params, format!("{name}.b_fwd"), n_out, dirs.forward())?,
            b_rev: bias_param(params, format!("{name}.b_rev"), n_in, dirs.reverse())?,
            n_in,
            n_out,
            fwd_act,
            rev_act,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let b_fwd = self.b_fwd.ok_or_else(|| direction_error("dense layer", "forward"))?;
        let h = tape.matmul(x, b[self.w], true)?;
        let h = tape.add_bias(h, b[b_fwd])?;
        apply_act(tape, h, self.fwd_act)
    }

    pub fn reverse<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, h: Var) -> Result<Var> {
        let b_rev = self.b_rev.ok_or_else(|| direction_error("dense layer", "reverse"))?;
        let x = tape.matmul(h, b[self.w], false)?;
        let x = tape.add_bias(x, b[b_rev])?;
        apply_act(tape, x, self.rev_act)
    }

    pub fn param_count(&self) -> ParamCount {
        let biases = self.b_fwd.map_or(0, |_| self.n_out) + self.b_rev.map_or(0, |_| self.n_in);
        ParamCount::new(self.n_in * self.n_out, biases)
    }
}

/// Convolution forward, transposed convolution with the same kernel in reverse.
#[derive(Clone, Debug)]
pub struct BiConv2d {
    pub kernel: ParamId,
    pub b_fwd: Option<ParamId>,
    pub b_rev: Option<ParamId>,
    pub geom: ConvGeometry,
    pub fwd_act: Option<GNova>,
    pub rev_act: Option<GNova>,
}

impl BiConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        geom: ConvGeometry,
        dirs: Directions,
        fwd_act: Option<GNova>,
        rev_act: Option<GNova>,
        rng: &mut RngState,
    ) -> Result<Self> {
        let kk = geom.kernel * geom.kernel;
        let kernel = params.add(
            format!("{name}.k"),
            init_uniform(geom.kernel_shape().to_vec(), geom.c_in * kk, geom.c_out * kk, rng),
        )?;
        Ok(Self {
            kernel,
            b_fwd: bias_param(params, format!("{name}.b_fwd"), geom.c_out, dirs.forward())?,
            b_rev: bias_param(params, format!("{name}.b_rev"), geom.c_in, dirs.reverse())?,
            geom,
            fwd_act,
            rev_act,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let h = tape.conv2d(x, b[self.kernel], self.geom)?;
        let h = add_opt_bias(tape, b, h, self.b_fwd)?;
        apply_act(tape, h, self.fwd_act)
    }

    pub fn reverse<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, y: Var) -> Result<Var> {
        let x = tape.conv2d_transpose(y, b[self.kernel], self.geom)?;
        let x = add_opt_bias(tape, b, x, self.b_rev)?;
        apply_act(tape, x, self.rev_act)
    }

    pub fn param_count(&self) -> ParamCount {
        let g = &self.geom;
        let biases = self.b_fwd.map_or(0, |_| g.c_out) + self.b_rev.map_or(0, |_| g.c_in);
        ParamCount::new(g.c_out * g.c_in * g.kernel * g.kernel, biases)
    }
}

/// Residual block with two shape-preserving convolutions.
///
/// Forward: `y = x + conv2(a(conv1(x)))`.
/// Reverse: `x̂ = y + conv1ᵀ(a(conv2ᵀ(y)))`, the same layers in reverse order.
#[derive(Clone, Debug)]
pub struct BiResBlock {
    pub conv1: BiConv2d,
    pub conv2: BiConv2d,
    pub act: GNova,
}

impl BiResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        hw: (usize, usize),
        dirs: Directions,
        act: GNova,
        rng: &mut RngState,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::ShapeConfig(format!(
                "residual block kernel {kernel} cannot preserve shape"
            )));
        }
        let geom = ConvGeometry::new(channels, channels, kernel, 1, kernel / 2, hw.0, hw.1)?;
        let conv1 = BiConv2d::new(params, &format!("{name}.conv1"), geom, dirs, None, None, rng)?;
        let conv2 = BiConv2d::new(params, &format!("{name}.conv2"), geom, dirs, None, None, rng)?;
        Self::from_convs(conv1, conv2, act)
    }

    pub fn from_convs(conv1: BiConv2d, conv2: BiConv2d, act: GNova) -> Result<Self> {
        for c in [&conv1.geom, &conv2.geom] {
            if c.c_in != c.c_out || c.in_h != c.out_h || c.in_w != c.out_w {
                return Err(Error::ShapeConfig(format!(
                    "residual member conv is not shape-preserving: {c:?}"
                )));
            }
        }
        if conv1.geom.c_in != conv2.geom.c_in || conv1.geom.in_h != conv2.geom.in_h {
            return Err(Error::ShapeConfig("residual member convs disagree".into()));
        }
        if conv1.fwd_act.is_some() || conv1.rev_act.is_some() || conv2.fwd_act.is_some() || conv2.rev_act.is_some() {
            return Err(Error::ShapeConfig(
                "residual member convs must not carry their own activation".into(),
            ));
        }
        Ok(Self { conv1, conv2, act })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, b, x)?;
        let h = tape.gnova(h, self.act)?;
        let h = self.conv2.forward(tape, b, h)?;
        tape.add(x, h)
    }

    pub fn reverse<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, y: Var) -> Result<Var> {
        let h = self.conv2.reverse(tape, b, y)?;
        let h = tape.gnova(h, self.act)?;
        let h = self.conv1.reverse(tape, b, h)?;
        tape.add(y, h)
    }

    pub fn param_count(&self) -> ParamCount {
        self.conv1.param_count() + self.conv2.param_count()
    }
}

/// One element of a bidirectional stack.
#[derive(Clone, Debug)]
pub enum BiLayer {
    Dense(BiDense),
    Conv(BiConv2d),
    Res(BiResBlock),
    /// `[B, C, H, W] ↔ [B, C·H·W]`.
    Flatten {
        chw: [usize; 3],
    },
}

impl BiLayer {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        match self {
            BiLayer::Dense(l) => l.forward(tape, b, x),
            BiLayer::Conv(l) => l.forward(tape, b, x),
            BiLayer::Res(l) => l.forward(tape, b, x),
            BiLayer::Flatten { chw } => {
                let rows = tape.shape(x)[0];
                tape.reshape(x, vec![rows, chw.iter().product()])
            }
        }
    }

    pub fn reverse<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, y: Var) -> Result<Var> {
        match self {
            BiLayer::Dense(l) => l.reverse(tape, b, y),
            BiLayer::Conv(l) => l.reverse(tape, b, y),
            BiLayer::Res(l) => l.reverse(tape, b, y),
            BiLayer::Flatten { chw } => {
                let rows = tape.shape(y)[0];
                tape.reshape(y, vec![rows, chw[0], chw[1], chw[2]])
            }
        }
    }

    pub fn param_count(&self) -> ParamCount {
        match self {
            BiLayer::Dense(l) => l.param_count(),
            BiLayer::Conv(l) => l.param_count(),
            BiLayer::Res(l) => l.param_count(),
            BiLayer::Flatten { .. } => ParamCount::default(),
        }
    }

    /// Every weight (kernel or matrix) tensor of the layer, in a fixed order.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        match self {
            BiLayer::Dense(l) => vec![l.w],
            BiLayer::Conv(l) => vec![l.kernel],
            BiLayer::Res(l) => vec![l.conv1.kernel, l.conv2.kernel],
            BiLayer::Flatten { .. } => vec![],
        }
    }

    /// `(forward bias, reverse bias)` pairs of the layer, in a fixed order.
    pub fn bias_ids(&self) -> Vec<(Option<ParamId>, Option<ParamId>)> {
        match self {
            BiLayer::Dense(l) => vec![(l.b_fwd, l.b_rev)],
            BiLayer::Conv(l) => vec![(l.b_fwd, l.b_rev)],
            BiLayer::Res(l) => vec![(l.conv1.b_fwd, l.conv1.b_rev), (l.conv2.b_fwd, l.conv2.b_rev)],
            BiLayer::Flatten { .. } => vec![],
        }
    }
}

/// Applies `layers` forward in order.
pub fn stack_forward<T: Scalar>(layers: &[BiLayer], tape: &mut Tape<T>, b: &Binding, mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(tape, b, x)?;
    }
    Ok(x)
}

/// Applies the reverse of every layer, last layer first.
pub fn stack_reverse<T: Scalar>(layers: &[BiLayer], tape: &mut Tape<T>, b: &Binding, mut y: Var) -> Result<Var> {
    for l in layers.iter().rev() {
        y = l.reverse(tape, b, y)?;
    }
    Ok(y)
}
