//! Parameterized layers. Each layer knows the names of its parameters in a
//! [`ParamStore`], how to initialize them, and how to record its forward pass
//! on a [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::kernels::ConvGeometry;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
    pub transposed: bool,
}

impl Conv {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, geom: ConvGeometry) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            out_channels,
            kernel,
            geom,
            transposed: false,
        }
    }

    pub fn transposed(prefix: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, geom: ConvGeometry) -> Self {
        Self {
            transposed: true,
            ..Self::new(prefix, in_channels, out_channels, kernel, geom)
        }
    }

    pub fn kernel_name(&self) -> String {
        format!("{}.kernel", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let k = self.kernel;
        let (shape, fan_in) = if self.transposed {
            // each output pixel of a transposed conv sees about k^2 / stride^2 taps per input channel
            let taps = (k * k).div_ceil(self.geom.stride.0 * self.geom.stride.1).max(1);
            ([self.in_channels, self.out_channels, k, k], self.in_channels * taps)
        } else {
            ([self.out_channels, self.in_channels, k, k], self.in_channels * k * k)
        };
        let bound = (3.0 / fan_in as f64).sqrt();
        store.insert(self.kernel_name(), Tensor::uniform(&shape, bound, rng))?;
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_channels]))
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(params, &self.kernel_name())?;
        let b = g.param(params, &self.bias_name())?;
        if self.transposed {
            g.conv_transpose2d(x, w, Some(b), self.geom)
        } else {
            g.conv2d(x, w, Some(b), self.geom)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let bound = (1.0 / self.in_features as f64).sqrt();
        store.insert(
            self.weight_name(),
            Tensor::uniform(&[self.out_features, self.in_features], bound, rng),
        )?;
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.out_features]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(params, &self.weight_name())?;
        let b = if self.bias {
            Some(g.param(params, &self.bias_name())?)
        } else {
            None
        };
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(format!("{}.gain", self.prefix), Tensor::ones(&[self.dim]))?;
        store.insert(format!("{}.shift", self.prefix), Tensor::zeros(&[self.dim]))
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.param(params, &format!("{}.gain", self.prefix))?;
        let shift = g.param(params, &format!("{}.shift", self.prefix))?;
        g.layer_norm(x, gain, shift, LAYER_NORM_EPS)
    }
}
