use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Patch-merging convolution geometry for one stage.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct MergeSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MergeSpec {
    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

fn default_patch_merge() -> [MergeSpec; 4] {
    [
        MergeSpec { kernel: 7, stride: 4, padding: 3 },
        MergeSpec { kernel: 3, stride: 2, padding: 1 },
        MergeSpec { kernel: 3, stride: 2, padding: 1 },
        MergeSpec { kernel: 3, stride: 2, padding: 1 },
    ]
}

fn default_in_channels() -> usize {
    3
}

/// Hierarchical four-stage encoder plus all-MLP decoder hyperparameters.
///
/// The first stage merges with an overlapping 7/4/3 convolution and the rest
/// with 3/2/1, producing feature maps at 1/4, 1/8, 1/16 and 1/32 of the input.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stage_depths: [usize; 4],
    pub stage_dims: [usize; 4],
    pub stage_heads: [usize; 4],
    /// Spatial-reduction ratio of attention keys/values per stage.
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    #[serde(default = "default_patch_merge")]
    pub patch_merge: [MergeSpec; 4],
}

impl ModelConfig {
    /// Smallest trainable variant: depths [1,1,1,1], dims [16,32,64,128].
    pub fn mit_nano(num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            in_channels: 3,
            stage_depths: [1, 1, 1, 1],
            stage_dims: [16, 32, 64, 128],
            stage_heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
            decoder_dim: 64,
            patch_merge: default_patch_merge(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.patch_merge[0] != (MergeSpec { kernel: 7, stride: 4, padding: 3 }) {
            return Err(Error::Config(
                "stage 1 patch merge must use kernel 7 / stride 4 / padding 3".into(),
            ));
        }
        for (s, m) in self.patch_merge.iter().enumerate().skip(1) {
            if *m != (MergeSpec { kernel: 3, stride: 2, padding: 1 }) {
                return Err(Error::Config(format!(
                    "stage {} patch merge must use kernel 3 / stride 2 / padding 1",
                    s + 1
                )));
            }
        }
        for s in 0..4 {
            if self.stage_dims[s] == 0 {
                return Err(Error::Config(format!("stage {} dim must be > 0", s + 1)));
            }
            if self.stage_heads[s] == 0 || self.stage_dims[s] % self.stage_heads[s] != 0 {
                return Err(Error::Config(format!(
                    "stage {}: {} heads must divide dim {}",
                    s + 1,
                    self.stage_heads[s],
                    self.stage_dims[s]
                )));
            }
            if self.sr_ratios[s] == 0 {
                return Err(Error::Config(format!("stage {} sr ratio must be >= 1", s + 1)));
            }
            if self.stage_depths[s] == 0 {
                return Err(Error::Config(format!("stage {} depth must be >= 1", s + 1)));
            }
        }
        if self.mlp_ratio == 0 || self.decoder_dim == 0 {
            return Err(Error::Config("mlp_ratio and decoder_dim must be > 0".into()));
        }
        Ok(())
    }

    /// Stable identity hash of the configuration, embedded in checkpoints.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        format!("{:x}", h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nano_config_is_valid() {
        ModelConfig::mit_nano(11).validate().unwrap();
    }

    #[test]
    fn merge_geometry_is_pinned() {
        let mut cfg = ModelConfig::mit_nano(11);
        cfg.patch_merge[0].kernel = 5;
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::mit_nano(11);
        cfg.patch_merge[2].stride = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn heads_must_divide_dims() {
        let mut cfg = ModelConfig::mit_nano(11);
        cfg.stage_heads[0] = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_config_changes() {
        let a = ModelConfig::mit_nano(11);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.decoder_dim = 32;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
