//! Convolutional block attention: a channel gate followed by a spatial
//! gate, each applied to the feature map as a multiplicative soft mask.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::ops::{self, PoolMode};
use crate::tensor::{Element, Tensor};

/// Attention hyperparameters shared by every attention site of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    /// Channel-MLP reduction ratio `r`; hidden width is `C / r`.
    pub reduction: usize,
    /// Odd side length of the spatial-attention convolution.
    pub kernel_size: usize,
}

impl AttentionConfig {
    /// Defaults for narrow (desk-scale) backbones.
    pub const MINI: AttentionConfig = AttentionConfig {
        reduction: 2,
        kernel_size: 7,
    };
    /// Defaults for full-width backbones.
    pub const FULL: AttentionConfig = AttentionConfig {
        reduction: 16,
        kernel_size: 7,
    };

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reduction == 0 || !channels.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "reduction ratio {} does not divide {channels} channels",
                self.reduction
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "spatial kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self::MINI
    }
}

/// Shared two-layer bias-free MLP over pooled channel descriptors.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T: Element> {
    pub channels: usize,
    /// `[C/r, C]`
    pub w0: Tensor<T>,
    /// `[C, C/r]`
    pub w1: Tensor<T>,
}

impl<T: Element> ChannelAttention<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        cfg: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let hidden = channels / cfg.reduction;
        let w0 = store.add_uniform(format!("{prefix}.channel.w0"), &[hidden, channels], channels, rng)?;
        let w1 = store.add_uniform(format!("{prefix}.channel.w1"), &[channels, hidden], hidden, rng)?;
        Ok(ChannelAttention { channels, w0, w1 })
    }

    fn mlp(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let hidden = ops::relu(&ops::matmul_nt(x, &self.w0)?);
        ops::matmul_nt(&hidden, &self.w1)
    }

    /// `sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))`, shaped `[N, C, 1, 1]`.
    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, _, _) = ops::dims4("channel_attention", features)?;
        if c != self.channels {
            return Err(Error::shape(
                "channel_attention",
                format!("configured for {} channels, got {:?}", self.channels, features.shape()),
            ));
        }
        let avg = ops::reshape(&ops::pool_global(features, PoolMode::Avg)?, &[n, c])?;
        let max = ops::reshape(&ops::pool_global(features, PoolMode::Max)?, &[n, c])?;
        let logits = ops::add(&self.mlp(&avg)?, &self.mlp(&max)?)?;
        ops::reshape(&ops::sigmoid(&logits), &[n, c, 1, 1])
    }
}

/// Convolution over the stacked (channel-mean, channel-max) descriptors.
#[derive(Debug, Clone)]
pub struct SpatialAttention<T: Element> {
    /// `[1, 2, k, k]`; input channel 0 sees the mean, channel 1 the max.
    pub kernel: Tensor<T>,
    pub kernel_size: usize,
}

impl<T: Element> SpatialAttention<T> {
    pub fn new(store: &mut ParamStore<T>, prefix: &str, cfg: &AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "spatial kernel size {} must be odd",
                cfg.kernel_size
            )));
        }
        let k = cfg.kernel_size;
        let kernel = store.add_uniform(format!("{prefix}.spatial.kernel"), &[1, 2, k, k], 2 * k * k, rng)?;
        Ok(SpatialAttention { kernel, kernel_size: k })
    }

    /// Map shaped `[N, 1, H, W]`.
    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        ops::dims4("spatial_attention", features)?;
        let desc = ops::concat_channels(&[
            ops::pool_channel(features, PoolMode::Avg)?,
            ops::pool_channel(features, PoolMode::Max)?,
        ])?;
        let logits = ops::conv2d(&desc, &self.kernel, 1, (self.kernel_size - 1) / 2)?;
        Ok(ops::sigmoid(&logits))
    }
}

/// The two attention maps produced by one [`Cbam`] application.
#[derive(Debug, Clone)]
pub struct AttentionMaps<T: Element> {
    pub channel: Tensor<T>,
    pub spatial: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Cbam<T: Element> {
    pub channel: ChannelAttention<T>,
    pub spatial: SpatialAttention<T>,
}

impl<T: Element> Cbam<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        cfg: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Cbam {
            channel: ChannelAttention::new(store, prefix, channels, cfg, rng)?,
            spatial: SpatialAttention::new(store, prefix, cfg, rng)?,
        })
    }

    pub fn apply(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_with_maps(features).map(|(out, _)| out)
    }

    /// Channel gate first, then the spatial gate computed on the
    /// channel-refined features.
    pub fn apply_with_maps(&self, features: &Tensor<T>) -> Result<(Tensor<T>, AttentionMaps<T>)> {
        let channel = self.channel.forward(features)?;
        let refined = ops::mul_broadcast(features, &channel)?;
        let spatial = self.spatial.forward(&refined)?;
        let out = ops::mul_broadcast(&refined, &spatial)?;
        Ok((out, AttentionMaps { channel, spatial }))
    }
}
