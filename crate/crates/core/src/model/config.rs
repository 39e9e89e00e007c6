use serde::{Deserialize, Serialize};

use crate::error::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_vision: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Zero means "size to the training vocabulary".
    pub vocab_size: usize,
    pub loc_proj_channels: Vec<usize>,
    pub loc_decoder_layers: usize,
    /// Upper bound on the decoder sequence after image-slot expansion.
    pub max_sequence_length: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale configuration: small enough for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_vision: 32,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 0,
            loc_proj_channels: vec![64, 64],
            loc_decoder_layers: 3,
            max_sequence_length: 128,
            seed: 0,
        }
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Width of the localization query after projection.
    pub fn loc_width(&self) -> usize {
        *self.loc_proj_channels.last().unwrap_or(&self.d_model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.loc_decoder_layers < 1 {
            return fail("loc_decoder_layers must be >= 1".into());
        }
        if self.loc_proj_channels.is_empty() || self.loc_proj_channels.contains(&0) {
            return fail("loc_proj_channels must be non-empty and positive".into());
        }
        if !self.loc_width().is_multiple_of(self.n_heads) {
            return fail(format!(
                "last loc_proj_channels width {} must be divisible by n_heads {}",
                self.loc_width(),
                self.n_heads
            ));
        }
        if self.d_vision == 0 || self.n_layers == 0 {
            return fail("d_vision and n_layers must be positive".into());
        }
        if self.max_sequence_length <= self.n_patches() {
            return fail(format!(
                "max_sequence_length {} must exceed the {} image patches",
                self.max_sequence_length,
                self.n_patches()
            ));
        }
        Ok(())
    }
}

/// Parameter groups with independent freeze flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Projector,
    Decoder,
    Localizer,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::Projector, Group::Decoder, Group::Localizer];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub projector: bool,
    pub decoder: bool,
    pub localizer: bool,
}

impl Default for FreezeFlags {
    /// Vision backbone frozen; everything else trains.
    fn default() -> Self {
        Self {
            encoder: true,
            projector: false,
            decoder: false,
            localizer: false,
        }
    }
}

impl FreezeFlags {
    pub fn is_frozen(&self, g: Group) -> bool {
        match g {
            Group::Encoder => self.encoder,
            Group::Projector => self.projector,
            Group::Decoder => self.decoder,
            Group::Localizer => self.localizer,
        }
    }
}
