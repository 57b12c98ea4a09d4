//! The full classifier: encoder block → decoder block with ensemble fusion →
//! transformer classification block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::decoder::{ensemble_sum, EnsembleCoefficients, Tdb, TdbConfig};
use crate::encoder::{Ceb, CebConfig, CebOutput, SubEncoderConfig, SubEncoderId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::{Tcb, TcbConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side of the square input image.
    pub image_size: usize,
    pub in_channels: usize,
    pub encoder: CebConfig,
    pub decoder: TdbConfig,
    pub transformer: TcbConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 224x224 input, desk-scale encoder widths, standard tiny transformer.
    pub fn desk() -> Self {
        Self {
            image_size: 224,
            in_channels: 3,
            encoder: CebConfig::preset(true),
            decoder: TdbConfig::default(),
            transformer: TcbConfig::default(),
        }
    }

    /// 224x224 input with wider encoders.
    pub fn full() -> Self {
        Self {
            encoder: CebConfig::preset(false),
            ..Self::desk()
        }
    }

    /// 56x56 input, window 7, one head, depth 2 per level: the smallest
    /// model on which every level still has shifted windows.
    pub fn tiny() -> Self {
        Self {
            image_size: 56,
            in_channels: 3,
            encoder: small_encoders(),
            decoder: TdbConfig {
                out_channels: 3,
                hidden_channels: 4,
            },
            transformer: TcbConfig {
                patch_size: 1,
                ..TcbConfig::tiny()
            },
        }
    }

    /// 32x32 input with window 2: cheap enough to train in the test suite.
    pub fn micro() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            encoder: small_encoders(),
            decoder: TdbConfig {
                out_channels: 3,
                hidden_channels: 4,
            },
            transformer: TcbConfig {
                patch_size: 2,
                embed_dim: 8,
                depths: [2, 2, 2, 2],
                heads: [1, 1, 2, 2],
                window_size: 2,
                mlp_ratio: 2.0,
                num_classes: 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.transformer.validate(self.image_size)
    }
}

fn small_encoders() -> CebConfig {
    let cfg = |id, widths: &[usize]| SubEncoderConfig {
        id,
        stage_widths: widths.to_vec(),
        extra_convs_per_stage: 0,
    };
    CebConfig {
        se1: cfg(SubEncoderId::Se1, &[4]),
        se2: cfg(SubEncoderId::Se2, &[4, 4, 8]),
        se3: cfg(SubEncoderId::Se3, &[4, 8]),
    }
}

/// Node handles for every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CetcForward {
    pub ceb: CebOutput,
    pub fsd: [NodeId; 3],
    pub fused: NodeId,
    pub logits: NodeId,
}

pub struct Cetc {
    pub config: ModelConfig,
    pub ceb: Ceb,
    pub tdb: Tdb,
    pub tcb: Tcb,
}

impl Cetc {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ceb = Ceb::new(&config.encoder, config.in_channels)?;
        let tdb = Tdb::new(&config.decoder, config.encoder.out_channels(), config.image_size)?;
        let tcb = Tcb::new(config.transformer.clone(), config.decoder.out_channels, config.image_size)?;
        Ok(Self { config, ceb, tdb, tcb })
    }

    /// Freshly initialized parameters; the same seed always yields the same values.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.ceb.init(&mut store, &mut rng)?;
        self.tdb.init(&mut store, &mut rng)?;
        self.tcb.init(&mut store, &mut rng)?;
        store.round_to_f32();
        Ok(store)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match *shape {
            [_, ch, h, w] if ch == c.in_channels && h == c.image_size && w == c.image_size => Ok(()),
            _ => Err(Error::shape(
                "cetc_forward",
                format!(
                    "expected (batch, {}, {}, {}), got {shape:?}",
                    c.in_channels, c.image_size, c.image_size
                ),
            )),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: NodeId,
        coeffs: &EnsembleCoefficients,
    ) -> Result<CetcForward> {
        self.check_input(g.shape(x))?;
        let ceb = self.ceb.forward(g, params, x)?;
        let fsd = self.tdb.decode(g, params, ceb.as_array())?;
        let fused = ensemble_sum(g, fsd, coeffs)?;
        let logits = self.tcb.forward(g, params, fused)?;
        Ok(CetcForward {
            ceb,
            fsd,
            fused,
            logits,
        })
    }

    /// Logits for a batch without recording gradients.
    pub fn predict(&self, params: &ParamStore, input: &Tensor, coeffs: &EnsembleCoefficients) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, params, x, coeffs)?;
        Ok(g.value(out.logits).clone())
    }
}
