//! The bidirectional VAE and its unidirectional twin.
//!
//! The bidirectional model has a trunk `N`, a mean head `W` and a log-variance
//! head `V`. Encoding runs `N` then both heads forward. Decoding runs `W` in
//! reverse and then `N` in reverse with the same weights, so `V` takes no part
//! in it. The twin has the same layer shapes but keeps separate encoder (φ)
//! and decoder (θ) parameter sets, with the decoder network used only in
//! reverse.

mod arch;

pub use arch::{parse_input_shape, parse_layers, Architecture, LayerSpec};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{stack_forward, stack_reverse, BiConv2d, BiDense, BiLayer, BiResBlock, Directions, ParamCount};
use crate::metrics::GmmModel;
use crate::rng::RngState;
use crate::tensor::{ConvGeometry, Scalar, Tensor};

/// Forward and reverse bias ids of one layer.
type BiasPair = (Option<ParamId>, Option<ParamId>);

/// Bounds applied to the predicted log-variance.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Rows per tape when encoding or decoding outside of training.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// One network, encoding forward and decoding in reverse.
    Bvae,
    /// Separate encoder and decoder networks of matching shape.
    Twin,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bvae" => Ok(ModelKind::Bvae),
            "twin" => Ok(ModelKind::Twin),
            _ => Err(Error::config(format!("unknown model kind {s:?} (bvae|twin)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bvae => "bvae",
            ModelKind::Twin => "twin",
        }
    }
}

/// Diagonal Gaussian posteriors for a batch, both `[B, J]`.
#[derive(Clone, Debug)]
pub struct GaussianPosterior<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

impl<T: Scalar> GaussianPosterior<T> {
    /// `z = μ + ε·exp(logvar / 2)`.
    pub fn reparameterize(&self, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.mu.same_shape(eps, "reparameterize")?;
        let half = T::lit(0.5);
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.logvar.data())
            .zip(eps.data())
            .map(|((&m, &l), &e)| m + e * (l * half).exp())
            .collect();
        Tensor::new(self.mu.shape().to_vec(), data)
    }

    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where an interpolation mixes its two endpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    /// Mix posterior means, then decode.
    #[default]
    Latent,
    /// Mix pixels, then encode and decode the mixture.
    Pixel,
}

/// Source of latent codes for generation.
#[derive(Clone, Copy, Debug)]
pub enum Sampler<'a> {
    StandardNormal,
    /// A fitted mixture; `None` means none has been fitted.
    Gmm(Option<&'a GmmModel>),
}

/// Trunk and mean head of one network.
#[derive(Clone, Debug)]
struct Network {
    trunk: Vec<BiLayer>,
    mean: BiDense,
}

impl Network {
    fn build<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        arch: &Architecture,
        dirs: Directions,
        rng: &mut RngState,
    ) -> Result<(Self, usize)> {
        enum Cur {
            Spatial([usize; 3]),
            Flat(usize),
        }
        let g = Some(arch.gnova);
        let mut trunk = Vec::new();
        let mut cur = Cur::Spatial(arch.input);
        for (i, spec) in arch.layers.iter().enumerate() {
            let name = format!("{prefix}trunk.{i}");
            // The first layer's reverse output is the pixel logits.
            let rev_act = if i == 0 { None } else { g };
            match *spec {
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let Cur::Spatial([c, h, w]) = cur else {
                        return Err(Error::ShapeConfig(format!(
                            "layer {i} ({spec}) needs a spatial input but follows a dense layer"
                        )));
                    };
                    let geom = ConvGeometry::new(c, channels, kernel, stride, pad, h, w)?;
                    trunk.push(BiLayer::Conv(BiConv2d::new(
                        params, &name, geom, dirs, g, rev_act, rng,
                    )?));
                    cur = Cur::Spatial([channels, geom.out_h, geom.out_w]);
                }
                LayerSpec::Res { kernel } => {
                    let Cur::Spatial([c, h, w]) = cur else {
                        return Err(Error::ShapeConfig(format!(
                            "layer {i} ({spec}) needs a spatial input but follows a dense layer"
                        )));
                    };
                    trunk.push(BiLayer::Res(BiResBlock::new(
                        params,
                        &name,
                        c,
                        kernel,
                        (h, w),
                        dirs,
                        arch.gnova,
                        rng,
                    )?));
                }
                LayerSpec::Dense { units } => {
                    let n_in = match cur {
                        Cur::Spatial(chw) => {
                            trunk.push(BiLayer::Flatten { chw });
                            chw.iter().product()
                        }
                        Cur::Flat(n) => n,
                    };
                    trunk.push(BiLayer::Dense(BiDense::new(
                        params, &name, n_in, units, dirs, g, rev_act, rng,
                    )?));
                    cur = Cur::Flat(units);
                }
            }
        }
        let features = match cur {
            Cur::Spatial(chw) => {
                trunk.push(BiLayer::Flatten { chw });
                chw.iter().product()
            }
            Cur::Flat(n) => n,
        };
        let mean_rev = if arch.layers.is_empty() { None } else { g };
        let mean = BiDense::new(
            params,
            &format!("{prefix}mean"),
            features,
            arch.latent,
            dirs,
            None,
            mean_rev,
            rng,
        )?;
        Ok((Self { trunk, mean }, features))
    }

    fn param_count(&self) -> ParamCount {
        self.trunk.iter().map(BiLayer::param_count).sum::<ParamCount>() + self.mean.param_count()
    }

    /// `(weight ids, bias id pairs)` in a fixed layer order.
    fn ids(&self) -> (Vec<ParamId>, Vec<BiasPair>) {
        let mut w: Vec<ParamId> = self.trunk.iter().flat_map(BiLayer::weight_ids).collect();
        let mut b: Vec<_> = self.trunk.iter().flat_map(BiLayer::bias_ids).collect();
        w.push(self.mean.w);
        b.push((self.mean.b_fwd, self.mean.b_rev));
        (w, b)
    }
}

/// A variational autoencoder: bidirectional or the unidirectional twin.
#[derive(Clone, Debug)]
pub struct Vae<T: Scalar> {
    kind: ModelKind,
    arch: Architecture,
    /// One set for the bidirectional model; `[φ, θ]` for the twin.
    sets: Vec<ParamSet<T>>,
    encoder: Network,
    logvar: BiDense,
    decoder: Network,
}

impl<T: Scalar> Vae<T> {
    pub fn new(kind: ModelKind, arch: Architecture, seed: u64) -> Result<Self> {
        match kind {
            ModelKind::Bvae => Self::bidirectional(arch, seed),
            ModelKind::Twin => Self::twin(arch, seed),
        }
    }

    pub fn bidirectional(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = RngState::new(seed);
        let mut ps = ParamSet::new();
        let (net, features) = Network::build(&mut ps, "", &arch, Directions::Both, &mut rng)?;
        let logvar = BiDense::new(
            &mut ps,
            "logvar",
            features,
            arch.latent,
            Directions::ForwardOnly,
            None,
            None,
            &mut rng,
        )?;
        Ok(Self {
            kind: ModelKind::Bvae,
            arch,
            sets: vec![ps],
            decoder: net.clone(),
            encoder: net,
            logvar,
        })
    }

    pub fn twin(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = RngState::new(seed);
        let mut phi = ParamSet::new();
        let mut theta = ParamSet::new();
        let (encoder, features) = Network::build(&mut phi, "phi.", &arch, Directions::ForwardOnly, &mut rng)?;
        let logvar = BiDense::new(
            &mut phi,
            "phi.logvar",
            features,
            arch.latent,
            Directions::ForwardOnly,
            None,
            None,
            &mut rng,
        )?;
        let (decoder, _) = Network::build(&mut theta, "theta.", &arch, Directions::ReverseOnly, &mut rng)?;
        Ok(Self {
            kind: ModelKind::Twin,
            arch,
            sets: vec![phi, theta],
            encoder,
            logvar,
            decoder,
        })
    }

    /// The twin whose encoder uses this model's `W` and whose decoder uses
    /// `Wᵀ`, with every bias copied to the matching direction.
    pub fn tied_twin(&self) -> Result<Self> {
        if self.kind != ModelKind::Bvae {
            return Err(Error::contract("tied_twin needs a bidirectional model"));
        }
        let mut twin = Self::twin(self.arch.clone(), 0)?;
        let (w, b) = self.encoder.ids();
        let (enc_w, enc_b) = twin.encoder.ids();
        let (dec_w, dec_b) = twin.decoder.ids();
        for i in 0..w.len() {
            let v = self.value(w[i]).clone();
            twin.set_value(enc_w[i], v.clone())?;
            twin.set_value(dec_w[i], v)?;
        }
        for i in 0..b.len() {
            if let (Some(src), Some(dst)) = (b[i].0, enc_b[i].0) {
                twin.set_value(dst, self.value(src).clone())?;
            }
            if let (Some(src), Some(dst)) = (b[i].1, dec_b[i].1) {
                twin.set_value(dst, self.value(src).clone())?;
            }
        }
        twin.set_value(twin.logvar.w, self.value(self.logvar.w).clone())?;
        let (src, dst) = (
            self.logvar.b_fwd.expect("forward bias"),
            twin.logvar.b_fwd.expect("forward bias"),
        );
        twin.set_value(dst, self.value(src).clone())?;
        Ok(twin)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent
    }

    pub fn param_sets(&self) -> &[ParamSet<T>] {
        &self.sets
    }

    pub fn param_sets_mut(&mut self) -> &mut [ParamSet<T>] {
        &mut self.sets
    }

    fn set_index(&self, id: ParamId) -> usize {
        self.sets
            .iter()
            .position(|s| s.owns(id))
            .unwrap_or_else(|| panic!("parameter {id:?} does not belong to this model"))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.sets[self.set_index(id)].value(id)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let i = self.set_index(id);
        self.sets[i].set_value(id, value)
    }

    /// Every parameter as `(name, id)`, sets in order, registration order within.
    pub fn named_ids(&self) -> Vec<(String, ParamId)> {
        self.sets
            .iter()
            .flat_map(|s| s.ids().map(move |id| (s.name(id).to_string(), id)))
            .collect()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.sets.iter().find_map(|s| s.id_of(name))
    }

    /// Weights of the log-variance head `V`.
    pub fn logvar_weight(&self) -> ParamId {
        self.logvar.w
    }

    pub fn param_count(&self) -> ParamCount {
        let mut c = self.encoder.param_count();
        if self.kind == ModelKind::Twin {
            c = c + self.decoder.param_count();
        }
        let v = self.logvar.param_count();
        c.logvar_weights += v.weights;
        c.biases += v.biases;
        c.total += v.total;
        c
    }

    /// Registers all parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let refs: Vec<&ParamSet<T>> = self.sets.iter().collect();
        Binding::bind(tape, &refs)
    }

    /// Checks `x` against the input shape and returns it as `[B, C, H, W]`.
    pub fn batch_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = self.arch.input;
        let ok = match x.shape() {
            [_, cc, hh, ww] => [*cc, *hh, *ww] == self.arch.input,
            [_, p] => *p == c * h * w,
            _ => false,
        };
        if !ok {
            return Err(Error::shape("encode", x.shape(), &[0, c, h, w]));
        }
        x.reshape(vec![x.rows(), c, h, w])
    }

    /// Encodes `x: [B, C, H, W]` into `(μ, clamped logvar)`, each `[B, J]`.
    pub fn encode_on(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<(Var, Var)> {
        let h = stack_forward(&self.encoder.trunk, tape, b, x)?;
        let mu = self.encoder.mean.forward(tape, b, h)?;
        let lv = self.logvar.forward(tape, b, h)?;
        let lv = tape.clamp(lv, T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX))?;
        Ok((mu, lv))
    }

    /// Pixel logits `[B, C·H·W]` for latents `z: [B, J]`.
    pub fn decode_logits_on(&self, tape: &mut Tape<T>, b: &Binding, z: Var) -> Result<Var> {
        let zs = tape.shape(z);
        if zs.len() != 2 || zs[1] != self.arch.latent {
            return Err(Error::shape("decode", zs, &[0, self.arch.latent]));
        }
        let rows = zs[0];
        let h = self.decoder.mean.reverse(tape, b, z)?;
        let out = stack_reverse(&self.decoder.trunk, tape, b, h)?;
        tape.reshape(out, vec![rows, self.arch.pixels()])
    }

    fn chunked<F>(&self, rows: usize, mut f: F) -> Result<()>
    where
        F: FnMut(std::ops::Range<usize>) -> Result<()>,
    {
        let mut start = 0;
        while start < rows {
            let end = (start + INFERENCE_CHUNK).min(rows);
            f(start..end)?;
            start = end;
        }
        Ok(())
    }

    /// Posterior parameters for every row of `x`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<GaussianPosterior<T>> {
        let x = self.batch_input(x)?;
        let j = self.arch.latent;
        let (mut mu, mut lv) = (Vec::with_capacity(x.rows() * j), Vec::with_capacity(x.rows() * j));
        self.chunked(x.rows(), |r| {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape);
            let xv = tape.constant(x.select_rows(&r.collect::<Vec<_>>())?);
            let (m, l) = self.encode_on(&mut tape, &b, xv)?;
            mu.extend_from_slice(tape.value(m).data());
            lv.extend_from_slice(tape.value(l).data());
            Ok(())
        })?;
        Ok(GaussianPosterior {
            mu: Tensor::new(vec![x.rows(), j], mu)?,
            logvar: Tensor::new(vec![x.rows(), j], lv)?,
        })
    }

    /// Pixel logits `[B, C·H·W]`.
    pub fn decode_logits(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, j) = z.dims2("decode")?;
        if j != self.arch.latent {
            return Err(Error::shape("decode", z.shape(), &[rows, self.arch.latent]));
        }
        let mut out = Vec::with_capacity(rows * self.arch.pixels());
        self.chunked(rows, |r| {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape);
            let zv = tape.constant(z.select_rows(&r.collect::<Vec<_>>())?);
            let l = self.decode_logits_on(&mut tape, &b, zv)?;
            out.extend_from_slice(tape.value(l).data());
            Ok(())
        })?;
        Tensor::new(vec![rows, self.arch.pixels()], out)
    }

    /// Decoded images `[B, C, H, W]` in `(0, 1)`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = self.arch.input;
        self.decode_logits(z)?
            .map(crate::autodiff::sigmoid)
            .into_reshape(vec![z.rows(), c, h, w])
    }

    /// `decode(encode(x).μ)`.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(x)?.mu)
    }

    /// `n` decoded samples drawn through `sampler`.
    pub fn generate(&self, n: usize, sampler: Sampler<'_>, rng: &mut RngState) -> Result<Tensor<T>> {
        let j = self.arch.latent;
        let z: Tensor<T> = match sampler {
            Sampler::StandardNormal => rng.standard_normal(vec![n, j]),
            Sampler::Gmm(None) => return Err(Error::State("gmm sampler requested but no mixture is fitted".into())),
            Sampler::Gmm(Some(gmm)) => {
                if gmm.dim() != j {
                    return Err(Error::shape("generate", &[gmm.dim()], &[j]));
                }
                gmm.sample(n, rng).cast()
            }
        };
        if n == 0 {
            let [c, h, w] = self.arch.input;
            return Ok(Tensor::zeros(vec![0, c, h, w]));
        }
        self.decode(&z)
    }

    /// Decodes `steps` evenly spaced mixtures of two images, endpoints included.
    pub fn interpolate(&self, xa: &Tensor<T>, xb: &Tensor<T>, steps: usize, mode: InterpMode) -> Result<Tensor<T>> {
        if steps < 2 {
            return Err(Error::contract(format!(
                "interpolation needs at least 2 steps, got {steps}"
            )));
        }
        let p = self.arch.pixels();
        let (xa, xb) = (xa.reshape(vec![1, p])?, xb.reshape(vec![1, p])?);
        let lambdas: Vec<T> = (0..steps).map(|i| T::lit(i as f64 / (steps - 1) as f64)).collect();
        let mix = |a: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
            let rows: Vec<Tensor<T>> = lambdas
                .iter()
                .map(|&l| a.scale(T::one() - l).add(&b.scale(l)))
                .collect::<Result<_>>()?;
            Tensor::stack_rows(&rows)
        };
        match mode {
            InterpMode::Latent => {
                let mu = self.encode(&Tensor::stack_rows(&[xa, xb])?)?.mu;
                let (ma, mb) = (mu.select_rows(&[0])?, mu.select_rows(&[1])?);
                self.decode(&mix(&ma, &mb)?)
            }
            InterpMode::Pixel => self.reconstruct(&mix(&xa, &xb)?),
        }
    }
}
