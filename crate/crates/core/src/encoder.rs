//! Convolutional encoder block: three independent sub-encoders that reduce
//! the input by factors of 2, 8 and 4 to capture local features at three
//! scales (112, 28 and 56 pixels for a 224 input).
//!
//! Each sub-encoder is a stack of stride-2 3x3 conv + ReLU stages, one per
//! halving, optionally followed by extra stride-1 convs per stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::nn::Conv;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubEncoderId {
    #[serde(rename = "SE1")]
    Se1,
    #[serde(rename = "SE2")]
    Se2,
    #[serde(rename = "SE3")]
    Se3,
}

impl SubEncoderId {
    pub const ALL: [SubEncoderId; 3] = [SubEncoderId::Se1, SubEncoderId::Se2, SubEncoderId::Se3];

    pub fn downsample_factor(self) -> usize {
        match self {
            SubEncoderId::Se1 => 2,
            SubEncoderId::Se2 => 8,
            SubEncoderId::Se3 => 4,
        }
    }

    /// Number of stride-2 stages needed for the downsample factor.
    pub fn stages(self) -> usize {
        self.downsample_factor().trailing_zeros() as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            SubEncoderId::Se1 => "se1",
            SubEncoderId::Se2 => "se2",
            SubEncoderId::Se3 => "se3",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubEncoderConfig {
    pub id: SubEncoderId,
    /// Output channels of each stride-2 stage; the last entry is the
    /// sub-encoder's output width.
    pub stage_widths: Vec<usize>,
    /// Extra stride-1 3x3 conv + ReLU layers after each stage's downsampling conv.
    #[serde(default)]
    pub extra_convs_per_stage: usize,
}

impl SubEncoderConfig {
    /// Desk-scale widths are the smallest that still exercise multi-stage
    /// stacks; the full-scale preset widens them and adds a conv per stage.
    pub fn preset(id: SubEncoderId, desk_scale: bool) -> Self {
        let (stage_widths, extra) = match (id, desk_scale) {
            (SubEncoderId::Se1, true) => (vec![16], 0),
            (SubEncoderId::Se2, true) => (vec![8, 16, 32], 0),
            (SubEncoderId::Se3, true) => (vec![16, 32], 0),
            (SubEncoderId::Se1, false) => (vec![64], 1),
            (SubEncoderId::Se2, false) => (vec![32, 64, 128], 1),
            (SubEncoderId::Se3, false) => (vec![64, 128], 1),
        };
        Self {
            id,
            stage_widths,
            extra_convs_per_stage: extra,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        self.id.downsample_factor()
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != self.id.stages() {
            return Err(Error::Config(format!(
                "{:?} downsamples by {} and needs {} stage widths, got {:?}",
                self.id,
                self.downsample_factor(),
                self.id.stages(),
                self.stage_widths
            )));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::Config(format!(
                "{:?} stage widths must be positive, got {:?}",
                self.id, self.stage_widths
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SubEncoder {
    pub config: SubEncoderConfig,
    layers: Vec<Conv>,
}

impl SubEncoder {
    pub fn new(config: SubEncoderConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        let prefix = format!("ceb.{}", config.id.key());
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (s, &width) in config.stage_widths.iter().enumerate() {
            layers.push(Conv::new(format!("{prefix}.stage{s}.conv0"), cin, width, 3, ConvGeometry::new(2, 1)));
            for e in 0..config.extra_convs_per_stage {
                layers.push(Conv::new(
                    format!("{prefix}.stage{s}.conv{}", e + 1),
                    width,
                    width,
                    3,
                    ConvGeometry::new(1, 1),
                ));
            }
            cin = width;
        }
        Ok(Self { config, layers })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }

    pub fn param_prefix(&self) -> String {
        format!("ceb.{}.", self.config.id.key())
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let [_, _, h, w] = g.value(x).dims4()?;
        let f = self.config.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(
                "sub_encoder_forward",
                format!("{:?} needs spatial size divisible by {f}, got {h}x{w}", self.config.id),
            ));
        }
        let mut cur = x;
        for layer in &self.layers {
            let y = layer.forward(g, params, cur)?;
            cur = g.relu(y);
        }
        Ok(cur)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CebConfig {
    pub se1: SubEncoderConfig,
    pub se2: SubEncoderConfig,
    pub se3: SubEncoderConfig,
}

impl CebConfig {
    pub fn preset(desk_scale: bool) -> Self {
        Self {
            se1: SubEncoderConfig::preset(SubEncoderId::Se1, desk_scale),
            se2: SubEncoderConfig::preset(SubEncoderId::Se2, desk_scale),
            se3: SubEncoderConfig::preset(SubEncoderId::Se3, desk_scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (cfg, want) in [(&self.se1, SubEncoderId::Se1), (&self.se2, SubEncoderId::Se2), (&self.se3, SubEncoderId::Se3)] {
            if cfg.id != want {
                return Err(Error::Config(format!(
                    "encoder slot {} holds a {:?} config",
                    want.key(),
                    cfg.id
                )));
            }
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn out_channels(&self) -> [usize; 3] {
        [self.se1.out_channels(), self.se2.out_channels(), self.se3.out_channels()]
    }
}

impl Default for CebConfig {
    fn default() -> Self {
        Self::preset(true)
    }
}

/// The three encoder feature maps.
#[derive(Clone, Copy, Debug)]
pub struct CebOutput {
    pub f_se1: NodeId,
    pub f_se2: NodeId,
    pub f_se3: NodeId,
}

impl CebOutput {
    pub fn as_array(&self) -> [NodeId; 3] {
        [self.f_se1, self.f_se2, self.f_se3]
    }
}

#[derive(Clone, Debug)]
pub struct Ceb {
    pub encoders: [SubEncoder; 3],
}

impl Ceb {
    pub fn new(config: &CebConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoders: [
                SubEncoder::new(config.se1.clone(), in_channels)?,
                SubEncoder::new(config.se2.clone(), in_channels)?,
                SubEncoder::new(config.se3.clone(), in_channels)?,
            ],
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.encoders.iter().try_for_each(|e| e.init(store, rng))
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<CebOutput> {
        let [e1, e2, e3] = &self.encoders;
        Ok(CebOutput {
            f_se1: e1.forward(g, params, x)?,
            f_se2: e2.forward(g, params, x)?,
            f_se3: e3.forward(g, params, x)?,
        })
    }
}
