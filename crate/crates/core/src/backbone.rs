//! Image encoder: three stride-2 convolution stages (1/8 resolution)
//! followed by transformer units over the flattened grid.
//!
//! The grid is flattened row-major: cell `(r, c)` of sample `b` is row
//! `b·H·W + r·W + c` of [`FeatureMap::grid`].

use std::sync::Arc;

use easyfirst_tensor::{AttnSegment, Element, Tensor, Var};
use rand::Rng;

use crate::params::{ParamId, ParamStore, Session};
use crate::transformer::{positional_encoding_2d, EncoderUnit, LayerNorm, LAYER_NORM_EPS};
use crate::{Error, Result};

pub const STRIDE: usize = 8;
const KERNEL: usize = 3;

#[derive(Debug, Clone)]
struct ConvStage {
    weight: ParamId,
    bias: ParamId,
    /// Per-channel affine of the per-sample normalization.
    norm: LayerNorm,
}

/// Normalizes each sample's `[H, W, C]` map by its own mean and variance
/// over all cells and channels, then applies a per-channel affine. Flat
/// regions keep their small activations instead of being rescaled to unit
/// variance.
fn sample_norm<T: Element>(s: &mut Session<T>, x: Var, norm: &LayerNorm) -> Result<Var> {
    let shape = s.tape.shape(x).to_vec();
    let (batch, c) = (shape[0], shape[3]);
    let per_sample = shape[1] * shape[2] * c;
    let flat = s.tape.reshape(x, vec![batch, per_sample])?;
    let ones = s.tape.constant(Tensor::full(vec![per_sample], T::one()));
    let zeros = s.tape.constant(Tensor::zeros(vec![per_sample]));
    let y = s
        .tape
        .layer_norm(flat, ones, zeros, T::from_f64(LAYER_NORM_EPS))?;
    let y = s.tape.reshape(y, vec![batch * shape[1] * shape[2], c])?;
    let (g, b) = (s.param(norm.gamma), s.param(norm.beta));
    let y = s.tape.mul_row(y, g)?;
    let y = s.tape.add_row(y, b)?;
    Ok(s.tape.reshape(y, shape)?)
}

/// Encoded image batch.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    /// `[batch·height·width × d]`
    pub grid: Var,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// `[height·width × d]`, already added into `grid`.
    pub positional: Arc<Tensor<T>>,
}

impl<T> FeatureMap<T> {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn segment(&self, sample: usize, q_start: usize, q_len: usize) -> AttnSegment {
        AttnSegment::full(q_start, q_len, sample * self.cells(), self.cells())
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    stages: Vec<ConvStage>,
    units: Vec<EncoderUnit>,
    image_height: usize,
    image_width: usize,
    positional: Arc<Tensor<T>>,
}

impl<T: Element> Backbone<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        image_height: usize,
        image_width: usize,
        channels: [usize; 2],
        d_model: usize,
        heads: usize,
        d_ffn: usize,
        units: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_extents(image_height, image_width)?;
        let widths = [1, channels[0], channels[1], d_model];
        let stages = (0..3)
            .map(|i| {
                let (cin, cout) = (widths[i], widths[i + 1]);
                let fan_in = KERNEL * KERNEL * cin;
                ConvStage {
                    weight: store.add_xavier(
                        format!("backbone.conv{i}.weight"),
                        vec![fan_in, cout],
                        fan_in,
                        cout,
                        rng,
                    ),
                    bias: store.add(format!("backbone.conv{i}.bias"), Tensor::zeros(vec![cout])),
                    norm: LayerNorm::new(store, &format!("backbone.conv{i}.norm"), cout),
                }
            })
            .collect();
        let units = (0..units)
            .map(|i| {
                EncoderUnit::new(
                    store,
                    &format!("backbone.unit{i}"),
                    d_model,
                    heads,
                    d_ffn,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let positional = Arc::new(positional_encoding_2d(
            image_height / STRIDE,
            image_width / STRIDE,
            d_model,
        )?);
        Ok(Backbone {
            stages,
            units,
            image_height,
            image_width,
            positional,
        })
    }

    pub fn grid_extents(&self) -> (usize, usize) {
        (self.image_height / STRIDE, self.image_width / STRIDE)
    }

    /// Convolution stack plus positional encoding: the input of the first
    /// transformer unit. `images` is `[B, H, W, 1]`.
    pub fn embed_grid(&self, s: &mut Session<T>, images: Var) -> Result<Var> {
        let shape = s.tape.shape(images).to_vec();
        if shape.len() != 4
            || shape[1] != self.image_height
            || shape[2] != self.image_width
            || shape[3] != 1
        {
            return Err(Error::config(format!(
                "expected images [B, {}, {}, 1], got {shape:?}",
                self.image_height, self.image_width
            )));
        }
        let batch = shape[0];
        let mut x = images;
        for stage in &self.stages {
            let (w, b) = (s.param(stage.weight), s.param(stage.bias));
            x = s.tape.conv2d(x, w, b, KERNEL, 2, 1)?;
            x = sample_norm(s, x, &stage.norm)?;
            x = s.tape.relu(x);
        }
        let (h, w) = self.grid_extents();
        let d = self.positional.cols();
        let x = s.tape.reshape(x, vec![batch * h * w, d])?;
        let pe = if batch == 1 {
            s.tape.leaf_shared(Arc::clone(&self.positional), false)
        } else {
            let mut data = Vec::with_capacity(batch * h * w * d);
            for _ in 0..batch {
                data.extend_from_slice(self.positional.data());
            }
            s.tape
                .constant(Tensor::from_vec(vec![batch * h * w, d], data)?)
        };
        Ok(s.tape.add(x, pe)?)
    }

    pub fn encode(&self, s: &mut Session<T>, images: Var) -> Result<FeatureMap<T>> {
        let batch = s.tape.shape(images)[0];
        let mut x = self.embed_grid(s, images)?;
        let (h, w) = self.grid_extents();
        let segments: Vec<AttnSegment> = (0..batch)
            .map(|b| AttnSegment::full(b * h * w, h * w, b * h * w, h * w))
            .collect();
        for unit in &self.units {
            x = unit.forward(s, x, &segments)?;
        }
        Ok(FeatureMap {
            grid: x,
            batch,
            height: h,
            width: w,
            positional: Arc::clone(&self.positional),
        })
    }
}

pub fn check_extents(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
        return Err(Error::config(format!(
            "image extents {h}×{w} must be positive multiples of {STRIDE}"
        )));
    }
    Ok(())
}
