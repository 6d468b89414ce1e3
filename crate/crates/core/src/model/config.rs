use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Architecture hyperparameters plus the fixed normalization statistics for
/// the scalar pitch and energy inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub conv_kernel: usize,
    /// Hidden width of the convolutional feed-forward sublayer.
    pub ffn_filter: usize,
    /// Hidden width of each variance predictor.
    pub predictor_filter: usize,
    pub n_speakers: usize,
    pub n_mels: usize,
    pub max_frames: usize,
    /// Per-phoneme duration cap applied at inference.
    pub max_duration: usize,
    pub dropout: f64,
    pub pitch_mean: f64,
    pub pitch_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
}

impl ModelConfig {
    /// Small configuration used for training on the synthetic corpus.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 32,
            n_heads: 2,
            encoder_blocks: 3,
            decoder_blocks: 4,
            conv_kernel: 3,
            ffn_filter: 64,
            predictor_filter: 32,
            n_speakers: 2,
            n_mels: 80,
            max_frames: 2000,
            max_duration: 50,
            dropout: 0.0,
            pitch_mean: 0.0,
            pitch_std: 1.0,
            energy_mean: 0.0,
            energy_std: 1.0,
        }
    }

    /// Full-size backbone: 512-dim, 3 encoder and 4 decoder blocks.
    pub fn paper() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 512,
            n_heads: 8,
            encoder_blocks: 3,
            decoder_blocks: 4,
            conv_kernel: 9,
            ffn_filter: 1024,
            predictor_filter: 256,
            n_speakers: 2,
            n_mels: 80,
            max_frames: 4000,
            max_duration: 50,
            dropout: 0.1,
            pitch_mean: 0.0,
            pitch_std: 1.0,
            energy_mean: 0.0,
            energy_std: 1.0,
        }
    }

    /// Minimal width for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 8,
            d_model: 4,
            n_heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            conv_kernel: 3,
            ffn_filter: 6,
            predictor_filter: 4,
            n_speakers: 2,
            n_mels: 80,
            max_frames: 200,
            max_duration: 50,
            dropout: 0.0,
            pitch_mean: 0.0,
            pitch_std: 1.0,
            energy_mean: 0.0,
            energy_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 2 != 0 {
            return fail(format!("d_model {} must be even", self.d_model));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return fail("encoder and decoder need at least one block".into());
        }
        if self.conv_kernel % 2 == 0 {
            return fail(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.vocab_size == 0 || self.n_speakers == 0 || self.n_mels == 0 {
            return fail("vocab_size, n_speakers and n_mels must be positive".into());
        }
        if self.ffn_filter == 0 || self.predictor_filter == 0 {
            return fail("filter sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.pitch_std <= 0.0 || self.energy_std <= 0.0 {
            return fail("normalization std must be positive".into());
        }
        if self.max_duration == 0 || self.max_frames == 0 {
            return fail("duration caps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Serializes as `model.<field>` entries.
    pub fn to_metadata(&self, out: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            out.insert(format!("model.{k}"), v);
        };
        put("vocab_size", self.vocab_size.to_string());
        put("d_model", self.d_model.to_string());
        put("n_heads", self.n_heads.to_string());
        put("encoder_blocks", self.encoder_blocks.to_string());
        put("decoder_blocks", self.decoder_blocks.to_string());
        put("conv_kernel", self.conv_kernel.to_string());
        put("ffn_filter", self.ffn_filter.to_string());
        put("predictor_filter", self.predictor_filter.to_string());
        put("n_speakers", self.n_speakers.to_string());
        put("n_mels", self.n_mels.to_string());
        put("max_frames", self.max_frames.to_string());
        put("max_duration", self.max_duration.to_string());
        put("dropout", self.dropout.to_string());
        put("pitch_mean", self.pitch_mean.to_string());
        put("pitch_std", self.pitch_std.to_string());
        put("energy_mean", self.energy_mean.to_string());
        put("energy_std", self.energy_std.to_string());
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let key = format!("model.{k}");
            let raw = meta
                .get(&key)
                .ok_or_else(|| Error::Config(format!("missing metadata key `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))
        }
        let cfg = ModelConfig {
            vocab_size: get(meta, "vocab_size")?,
            d_model: get(meta, "d_model")?,
            n_heads: get(meta, "n_heads")?,
            encoder_blocks: get(meta, "encoder_blocks")?,
            decoder_blocks: get(meta, "decoder_blocks")?,
            conv_kernel: get(meta, "conv_kernel")?,
            ffn_filter: get(meta, "ffn_filter")?,
            predictor_filter: get(meta, "predictor_filter")?,
            n_speakers: get(meta, "n_speakers")?,
            n_mels: get(meta, "n_mels")?,
            max_frames: get(meta, "max_frames")?,
            max_duration: get(meta, "max_duration")?,
            dropout: get(meta, "dropout")?,
            pitch_mean: get(meta, "pitch_mean")?,
            pitch_std: get(meta, "pitch_std")?,
            energy_mean: get(meta, "energy_mean")?,
            energy_std: get(meta, "energy_std")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn metadata_round_trip() {
        let mut cfg = ModelConfig::desk();
        cfg.pitch_mean = 177.3;
        let mut meta = BTreeMap::new();
        cfg.to_metadata(&mut meta);
        assert_eq!(ModelConfig::from_metadata(&meta).unwrap(), cfg);
    }
}
