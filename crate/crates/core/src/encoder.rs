//! Frozen stand-in for the visual backbone.
//!
//! Each patch is described by one-hot color, shape, row, and column slots
//! (index 0 of the color and shape slots means "background"). The
//! concatenated code is mapped to `feature_dim` by a fixed random projection
//! drawn once from the encoder seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticImage;
use crate::error::{Error, Result};
use crate::nn::normal_tensor;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub grid: usize,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub feature_dim: usize,
    pub seed: u64,
}

/// Patch features for one image: `patches x feature_dim`, row-major over the
/// patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures<T> {
    pub grid: Tensor<T>,
    pub rows: usize,
    pub cols: usize,
}

impl<T: Scalar> ImageFeatures<T> {
    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dim(&self) -> usize {
        self.grid.cols()
    }

    pub fn cast<U: Scalar>(&self) -> ImageFeatures<U> {
        ImageFeatures {
            grid: self.grid.cast(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder {
    config: EncoderConfig,
    projection: Tensor<f32>,
}

impl VisualEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.grid == 0 || config.feature_dim == 0 {
            return Err(Error::Config("encoder grid and feature_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let code = Self::code_dim(&config);
        // Four slots are active per patch; unit variance overall.
        let projection = normal_tensor(&[code, config.feature_dim], 0.5, &mut rng);
        Ok(Self { config, projection })
    }

    fn code_dim(c: &EncoderConfig) -> usize {
        (c.colors.len() + 1) + (c.shapes.len() + 1) + 2 * c.grid
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn projection(&self) -> &Tensor<f32> {
        &self.projection
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Encodes a synthetic image. Deterministic; the encoder has no trainable
    /// state.
    pub fn encode(&self, image: &SyntheticImage) -> Result<ImageFeatures<f32>> {
        let c = &self.config;
        if image.grid != c.grid {
            return Err(Error::Shape(format!(
                "image grid {} does not match encoder grid {}",
                image.grid, c.grid
            )));
        }
        let g = c.grid;
        let d = c.feature_dim;
        let shape_off = c.colors.len() + 1;
        let row_off = shape_off + c.shapes.len() + 1;
        let col_off = row_off + g;
        let mut out = Tensor::zeros(&[g * g, d]);
        for r in 0..g {
            for col in 0..g {
                let (ci, si) = match image.object_at(r, col) {
                    Some(o) => (1 + index_of(&c.colors, &o.color)?, 1 + index_of(&c.shapes, &o.shape)?),
                    None => (0, 0),
                };
                let active = [ci, shape_off + si, row_off + r, col_off + col];
                let row = out.row_mut(r * g + col);
                for &a in &active {
                    for (v, &w) in row.iter_mut().zip(self.projection.row(a)) {
                        *v += w;
                    }
                }
            }
        }
        Ok(ImageFeatures {
            grid: out,
            rows: g,
            cols: g,
        })
    }
}

fn index_of(list: &[String], item: &str) -> Result<usize> {
    list.iter()
        .position(|s| s == item)
        .ok_or_else(|| Error::Domain(format!("{item:?} is not in the encoder inventory")))
}
