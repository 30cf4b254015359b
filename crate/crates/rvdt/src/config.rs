use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels after the encoder.
    pub channels: usize,
    /// Temporal layers per direction: `layers - 1` transmission + 1 merging.
    pub layers: usize,
    /// Spatial window side.
    pub window: usize,
    /// Frames per temporal window; the recurrence pairs two features.
    pub temporal_window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub spatial_blocks: usize,
    /// Base width of the encoder UNet.
    pub unet_channels: usize,
    /// Image channels: 3 for sRGB, 4 for packed RAW.
    pub in_channels: usize,
    pub out_channels: usize,
    /// Non-blind models take a noise-level map as one extra input channel.
    pub blind: bool,
    /// `false` swaps the channel-spatial attention MLP for a plain MLP.
    pub csa_mlp: bool,
    /// Reserved; shifted windows are not implemented.
    pub shifted_windows: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 48,
            layers: 4,
            window: 8,
            temporal_window: 2,
            heads: 4,
            mlp_ratio: 2,
            spatial_blocks: 4,
            unet_channels: 16,
            in_channels: 3,
            out_channels: 3,
            blind: true,
            csa_mlp: true,
            shifted_windows: false,
        }
    }
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Channels fed to the encoder, including the noise map if non-blind.
    pub fn input_channels(&self) -> usize {
        self.in_channels + usize::from(!self.blind)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers < 2 {
            return fail(format!("need at least 2 temporal layers, got {}", self.layers));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!("{} channels not divisible by {} heads", self.channels, self.heads));
        }
        if !self.channels.is_multiple_of(4) || self.channels == 0 {
            return fail(format!("channels must be a positive multiple of 4, got {}", self.channels));
        }
        if self.mlp_ratio == 0 || !self.hidden().is_multiple_of(4) {
            return fail("MLP hidden width must be a positive multiple of 4".into());
        }
        if self.window == 0 || self.unet_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return fail("window, unet_channels and channel counts must be positive".into());
        }
        if self.temporal_window != 2 {
            return fail(format!(
                "temporal window must span the (current, propagated) pair, got {}",
                self.temporal_window
            ));
        }
        if self.shifted_windows {
            return fail("shifted windows are not supported".into());
        }
        Ok(())
    }
}
