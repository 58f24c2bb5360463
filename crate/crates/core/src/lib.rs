//! Region prompting with point tokens.
//!
//! A scribble is reduced to `K` sampled points, serialized as bracketed
//! integer pairs (`[32 64] [37 62]`), and fed as word tokens into a query
//! transformer that also cross-attends to image patch features. Its query
//! outputs become soft prompt rows for a frozen causal language model, which
//! is asked to produce the region's caption. Only the query transformer is
//! trained; the encoder and language model are fixed at construction.
//!
//! The crate is organized bottom up:
//!
//! - [`codec`] and [`mask`]: points, quantization, the token grammar, masks
//! - [`tensor`] and [`nn`]: dense math and layers with hand-written backward passes
//! - [`encoder`], [`qformer`], [`lm`]: the three model stages
//! - [`data`]: synthetic scenes, narrative parsing, vocabulary, batching
//! - [`train`] and [`checkpoint`]: optimization and persistence
//! - [`tasks`]: captioning, proposal ranking, multiple choice, QA, dialogue

pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod encoder;
pub mod error;
pub mod lm;
pub mod mask;
pub mod model;
pub mod nn;
pub mod qformer;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use codec::{
    decode_point_string, encode_points, quantize_coord, sample_points, tokenize_points, BBox, Point2D, PointTokenVocab,
    QuantizedPoint, Scribble, TokenId,
};
pub use data::{RegionCaptionPair, SyntheticDataset, SyntheticImage, Vocabulary};
pub use encoder::{EncoderConfig, ImageFeatures, VisualEncoder};
pub use error::{Error, Result};
pub use lm::{FrozenLm, LmConfig, Prompt, Segment};
pub use mask::{Mask, RleMask};
pub use model::ModelBundle;
pub use qformer::{AttentionMap, QFormerConfig, QFormerOutput, QFormerParams};
pub use tensor::{Scalar, Tensor};
pub use train::{train, TrainConfig, TrainReport};
