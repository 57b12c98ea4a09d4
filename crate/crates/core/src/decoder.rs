//! Transposed-convolutional decoder block and the controllable ensemble sum.
//!
//! Each sub-decoder returns one encoder map to the input resolution:
//!
//! | decoder | input scale | layers |
//! |---------|-------------|--------|
//! | SD1 | 1/2 | nearest x2 upsample, 3x3 conv, ReLU, 5x5 tconv (s1 p2), ReLU, 5x5 tconv (s1 p2) |
//! | SD2 | 1/8 | 5x5 tconv (s4 p2 op3), ReLU, 5x5 tconv (s2 p2 op1) |
//! | SD3 | 1/4 | 4x4 tconv (s4 p0) |
//!
//! The decoded maps are fused as `y = alpha * FSD1 + beta * FSD2 + gamma * FSD3`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::layout;
use crate::nn::Conv;
use crate::params::ParamStore;

const COEFF_SUM_TOLERANCE: f64 = 1e-9;

/// Ensemble weights for the SD1, SD2 and SD3 maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EnsembleCoefficients {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl EnsembleCoefficients {
    pub const EQUAL: EnsembleCoefficients = EnsembleCoefficients {
        alpha: 1.0 / 3.0,
        beta: 1.0 / 3.0,
        gamma: 1.0 / 3.0,
    };

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "ensemble coefficient {name} = {v} is outside [0, 1]"
                )));
            }
        }
        let sum = alpha + beta + gamma;
        if (sum - 1.0).abs() > COEFF_SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "ensemble coefficients ({alpha}, {beta}, {gamma}) sum to {sum}, not 1"
            )));
        }
        Ok(Self { alpha, beta, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }
}

impl Default for EnsembleCoefficients {
    fn default() -> Self {
        Self::EQUAL
    }
}

fn parse_coefficient(token: &str) -> Result<f64> {
    let token = token.trim();
    if token == "1/3" {
        return Ok(1.0 / 3.0);
    }
    token
        .parse::<f64>()
        .map_err(|_| Error::InvalidArgument(format!("cannot parse ensemble coefficient `{token}`")))
}

fn format_coefficient(v: f64) -> String {
    if v == 1.0 / 3.0 {
        "1/3".to_string()
    } else {
        format!("{v}")
    }
}

/// Parses `"A,B,G"`; each entry is a decimal or the exact token `1/3`.
impl FromStr for EnsembleCoefficients {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "expected three comma-separated coefficients, got `{s}`"
            )));
        }
        Self::new(
            parse_coefficient(parts[0])?,
            parse_coefficient(parts[1])?,
            parse_coefficient(parts[2])?,
        )
    }
}

impl fmt::Display for EnsembleCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{}",
            format_coefficient(self.alpha),
            format_coefficient(self.beta),
            format_coefficient(self.gamma)
        )
    }
}

impl TryFrom<String> for EnsembleCoefficients {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EnsembleCoefficients> for String {
    fn from(c: EnsembleCoefficients) -> String {
        c.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubDecoderId {
    Sd1,
    Sd2,
    Sd3,
}

impl SubDecoderId {
    pub const ALL: [SubDecoderId; 3] = [SubDecoderId::Sd1, SubDecoderId::Sd2, SubDecoderId::Sd3];

    /// How much smaller than the model input this decoder's input map is.
    pub fn upsample_factor(self) -> usize {
        match self {
            SubDecoderId::Sd1 => 2,
            SubDecoderId::Sd2 => 8,
            SubDecoderId::Sd3 => 4,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SubDecoderId::Sd1 => "sd1",
            SubDecoderId::Sd2 => "sd2",
            SubDecoderId::Sd3 => "sd3",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdbConfig {
    /// Channels of every decoded map (shared, so the maps can be summed).
    pub out_channels: usize,
    /// Width of the intermediate layers in SD1 and SD2.
    pub hidden_channels: usize,
}

impl Default for TdbConfig {
    fn default() -> Self {
        Self {
            out_channels: 3,
            hidden_channels: 8,
        }
    }
}

impl TdbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::Config(format!(
                "decoder channel counts must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

enum Stage {
    Upsample(usize),
    Conv(Conv),
    Relu,
}

pub struct SubDecoder {
    pub id: SubDecoderId,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Expected spatial side of the input map.
    pub input_size: usize,
    stages: Vec<Stage>,
}

impl SubDecoder {
    pub fn new(id: SubDecoderId, in_channels: usize, config: &TdbConfig, image_size: usize) -> Result<Self> {
        config.validate()?;
        let p = format!("tdb.{}", id.key());
        let (hid, out) = (config.hidden_channels, config.out_channels);
        let stages = match id {
            SubDecoderId::Sd1 => vec![
                Stage::Upsample(2),
                Stage::Conv(Conv::new(format!("{p}.upconv"), in_channels, hid, 3, ConvGeometry::new(1, 1))),
                Stage::Relu,
                Stage::Conv(Conv::transposed(format!("{p}.tconv1"), hid, hid, 5, ConvGeometry::new(1, 2))),
                Stage::Relu,
                Stage::Conv(Conv::transposed(format!("{p}.tconv2"), hid, out, 5, ConvGeometry::new(1, 2))),
            ],
            SubDecoderId::Sd2 => vec![
                Stage::Conv(Conv::transposed(
                    format!("{p}.tconv1"),
                    in_channels,
                    hid,
                    5,
                    ConvGeometry::new(4, 2).with_output_padding(3),
                )),
                Stage::Relu,
                Stage::Conv(Conv::transposed(
                    format!("{p}.tconv2"),
                    hid,
                    out,
                    5,
                    ConvGeometry::new(2, 2).with_output_padding(1),
                )),
            ],
            SubDecoderId::Sd3 => vec![Stage::Conv(Conv::transposed(
                format!("{p}.tconv"),
                in_channels,
                out,
                4,
                ConvGeometry::new(4, 0),
            ))],
        };
        Ok(Self {
            id,
            in_channels,
            out_channels: out,
            input_size: image_size / id.upsample_factor(),
            stages,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for stage in &self.stages {
            if let Stage::Conv(c) = stage {
                c.init(store, rng)?;
            }
        }
        Ok(())
    }

    pub fn param_prefix(&self) -> String {
        format!("tdb.{}.", self.id.key())
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, f: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = g.value(f).dims4()?;
        if h != self.input_size || w != self.input_size {
            return Err(Error::shape(
                "sub_decoder_forward",
                format!(
                    "{:?} expects a {}x{} map, got {h}x{w}",
                    self.id, self.input_size, self.input_size
                ),
            ));
        }
        if c != self.in_channels {
            return Err(Error::shape(
                "sub_decoder_forward",
                format!("{:?} expects {} channels, got {c}", self.id, self.in_channels),
            ));
        }
        let mut cur = f;
        let (mut ch, mut ph, mut pw) = (c, h, w);
        for stage in &self.stages {
            cur = match stage {
                Stage::Upsample(k) => {
                    let index = layout::upsample_nearest(n, ch, ph, pw, *k);
                    ph *= k;
                    pw *= k;
                    g.gather(cur, index, &[n, ch, ph, pw])?
                }
                Stage::Conv(conv) => {
                    let y = conv.forward(g, params, cur)?;
                    [_, ch, ph, pw] = g.value(y).dims4()?;
                    y
                }
                Stage::Relu => g.relu(cur),
            };
        }
        Ok(cur)
    }
}

/// `alpha * fsd1 + beta * fsd2 + gamma * fsd3`, elementwise.
pub fn ensemble_sum(
    g: &mut Graph,
    fsd: [NodeId; 3],
    coeffs: &EnsembleCoefficients,
) -> Result<NodeId> {
    let [a, b, c] = coeffs.as_array();
    g.weighted_sum(&[(fsd[0], a), (fsd[1], b), (fsd[2], c)])
        .map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape("ensemble_sum", detail),
            other => other,
        })
}

pub struct Tdb {
    pub decoders: [SubDecoder; 3],
}

impl Tdb {
    pub fn new(config: &TdbConfig, encoder_channels: [usize; 3], image_size: usize) -> Result<Self> {
        Ok(Self {
            decoders: [
                SubDecoder::new(SubDecoderId::Sd1, encoder_channels[0], config, image_size)?,
                SubDecoder::new(SubDecoderId::Sd2, encoder_channels[1], config, image_size)?,
                SubDecoder::new(SubDecoderId::Sd3, encoder_channels[2], config, image_size)?,
            ],
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.decoders.iter().try_for_each(|d| d.init(store, rng))
    }

    /// Decodes the three encoder maps, returning `[FSD1, FSD2, FSD3]`.
    pub fn decode(&self, g: &mut Graph, params: &ParamStore, maps: [NodeId; 3]) -> Result<[NodeId; 3]> {
        let [d1, d2, d3] = &self.decoders;
        Ok([
            d1.forward(g, params, maps[0])?,
            d2.forward(g, params, maps[1])?,
            d3.forward(g, params, maps[2])?,
        ])
    }
}
