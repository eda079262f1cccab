//! Full recognizer: shared backbone, parallel decoder and teacher decoder.

use easyfirst_tensor::{Element, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{check_extents, Backbone};
use crate::config::parse_value;
use crate::datagen::Sample;
use crate::decoder::Decoder;
use crate::params::{ParamStore, Session};
use crate::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of the first two conv stages; the third emits `d_model`.
    pub conv_channels: [usize; 2],
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub backbone_units: usize,
    pub decoder_units: usize,
    /// Maximum text length L, EOS included.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 32,
            image_width: 128,
            conv_channels: [32, 64],
            d_model: 128,
            heads: 4,
            d_ffn: 256,
            backbone_units: 2,
            decoder_units: 1,
            max_len: 30,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_extents(self.image_height, self.image_width)?;
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::config(
                "d_model must be divisible by 4 for 2D positional encoding",
            ));
        }
        if self.max_len == 0
            || self.decoder_units == 0
            || self.d_ffn == 0
            || self.conv_channels.contains(&0)
        {
            return Err(Error::config(
                "max_len, decoder_units, d_ffn and conv channels must be positive",
            ));
        }
        Ok(())
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_height" => self.image_height = parse_value(key, value)?,
            "image_width" => self.image_width = parse_value(key, value)?,
            "conv_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse_value(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.conv_channels = parts
                    .try_into()
                    .map_err(|_| Error::config("conv_channels needs two comma-separated values"))?;
            }
            "d_model" => self.d_model = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "d_ffn" => self.d_ffn = parse_value(key, value)?,
            "backbone_units" => self.backbone_units = parse_value(key, value)?,
            "decoder_units" => self.decoder_units = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub(crate) fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            (
                "conv_channels",
                format!("{},{}", self.conv_channels[0], self.conv_channels[1]),
            ),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ffn", self.d_ffn.to_string()),
            ("backbone_units", self.backbone_units.to_string()),
            ("decoder_units", self.decoder_units.to_string()),
            ("max_len", self.max_len.to_string()),
        ]
    }
}

/// Architecture; weights live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub parallel: Decoder<T>,
    pub teacher: Decoder<T>,
}

pub const TEACHER_PREFIX: &str = "teacher.";

impl<T: Element> Model<T> {
    /// Builds the architecture and freshly initialized weights. Parameter
    /// order (and therefore checkpoint layout) depends only on `config`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config;
        let backbone = Backbone::new(
            &mut store,
            c.image_height,
            c.image_width,
            c.conv_channels,
            c.d_model,
            c.heads,
            c.d_ffn,
            c.backbone_units,
            &mut rng,
        )?;
        let parallel = Decoder::new(
            &mut store,
            "parallel",
            c.d_model,
            c.heads,
            c.d_ffn,
            c.decoder_units,
            c.max_len,
            &mut rng,
        )?;
        let teacher = Decoder::new(
            &mut store,
            "teacher",
            c.d_model,
            c.heads,
            c.d_ffn,
            c.decoder_units,
            c.max_len,
            &mut rng,
        )?;
        Ok((
            Model {
                config: config.clone(),
                backbone,
                parallel,
                teacher,
            },
            store,
        ))
    }

    /// Stacks grayscale samples into a `[B, H, W, 1]` input.
    pub fn image_batch(&self, samples: &[&Sample]) -> Result<Tensor<T>> {
        let (h, w) = (self.config.image_height, self.config.image_width);
        let mut data = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if s.height != h || s.width != w {
                return Err(Error::data(format!(
                    "sample is {}×{}, model expects {h}×{w}",
                    s.height, s.width
                )));
            }
            data.extend(s.pixels.iter().map(|&p| T::from_f64(p as f64 / 255.0)));
        }
        Ok(Tensor::from_vec(vec![samples.len(), h, w, 1], data)?)
    }

    pub fn image_input(&self, s: &mut Session<T>, samples: &[&Sample]) -> Result<Var> {
        let batch = self.image_batch(samples)?;
        Ok(s.tape.constant(batch))
    }
}
