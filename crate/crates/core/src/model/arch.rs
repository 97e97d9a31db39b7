use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::GNova;

/// One trunk layer as written in an architecture string.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    /// `conv{C}k{K}s{S}p{P}`; stride and padding default to 1 and 0.
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// `res{K}`: shape-preserving residual block with odd kernel `K`.
    Res { kernel: usize },
    /// `dense{N}`.
    Dense { units: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                pad,
            } => write!(f, "conv{channels}k{kernel}s{stride}p{pad}"),
            LayerSpec::Res { kernel } => write!(f, "res{kernel}"),
            LayerSpec::Dense { units } => write!(f, "dense{units}"),
        }
    }
}

/// Splits `"16k4s2p1"` into `[(None, 16), (Some('k'), 4), ...]`.
fn numbered_fields(s: &str) -> Option<Vec<(Option<char>, usize)>> {
    let mut out = Vec::new();
    let mut tag = None;
    let mut digits = String::new();
    for c in s.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
        } else {
            if digits.is_empty() {
                return None;
            }
            out.push((tag, digits.parse().ok()?));
            digits.clear();
            tag = Some(c);
        }
    }
    if digits.is_empty() {
        return None;
    }
    out.push((tag, digits.parse().ok()?));
    Some(out)
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config(format!("cannot parse layer {s:?}"));
        let positive = |v: usize| if v == 0 { Err(bad()) } else { Ok(v) };
        if let Some(rest) = s.strip_prefix("conv") {
            let fields = numbered_fields(rest).ok_or_else(bad)?;
            let (mut channels, mut kernel, mut stride, mut pad) = (None, None, 1, 0);
            for (tag, v) in fields {
                match tag {
                    None => channels = Some(positive(v)?),
                    Some('k') => kernel = Some(positive(v)?),
                    Some('s') => stride = positive(v)?,
                    Some('p') => pad = v,
                    _ => return Err(bad()),
                }
            }
            Ok(LayerSpec::Conv {
                channels: channels.ok_or_else(bad)?,
                kernel: kernel.ok_or_else(bad)?,
                stride,
                pad,
            })
        } else if let Some(rest) = s.strip_prefix("res") {
            Ok(LayerSpec::Res {
                kernel: positive(rest.parse().map_err(|_| bad())?)?,
            })
        } else if let Some(rest) = s.strip_prefix("dense") {
            Ok(LayerSpec::Dense {
                units: positive(rest.parse().map_err(|_| bad())?)?,
            })
        } else {
            Err(bad())
        }
    }
}

/// Full network description shared by the bidirectional model and its twin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[C, H, W]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub latent: usize,
    pub gnova: GNova,
}

impl Architecture {
    /// Two stride-2 convolutions (1→16→32 channels) and a 128-unit dense layer.
    pub const DEFAULT_LAYERS: &'static str = "conv16k4s2p1,conv32k4s2p1,dense128";

    pub fn new(input: [usize; 3], layers: &str, latent: usize, gnova: GNova) -> Result<Self> {
        if latent == 0 {
            return Err(Error::config("latent dimension must be at least 1"));
        }
        if input.contains(&0) {
            return Err(Error::config(format!("input shape {input:?} has a zero extent")));
        }
        Ok(Self {
            input,
            layers: parse_layers(layers)?,
            latent,
            gnova,
        })
    }

    /// Default desk-scale MNIST network with latent size `latent`.
    pub fn mnist(latent: usize) -> Self {
        Self::new([1, 28, 28], Self::DEFAULT_LAYERS, latent, GNova::default()).expect("default architecture is valid")
    }

    pub fn pixels(&self) -> usize {
        self.input.iter().product()
    }

    pub fn layers_string(&self) -> String {
        self.layers
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Parses a comma-separated layer list. An empty string is an empty trunk.
pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

/// `"1x28x28"` → `[1, 28, 28]`.
pub fn parse_input_shape(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("cannot parse input shape {s:?}")))?;
    <[usize; 3]>::try_from(dims).map_err(|_| Error::config(format!("input shape {s:?} needs three extents CxHxW")))
}
