use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_points, sample_points, tokenize_points, PointTokenVocab, TokenId};
use crate::data::{RegionCaptionPair, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Regional,
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub image_id: String,
    pub point_tokens: Vec<TokenId>,
    /// Caption tokens followed by end-of-sequence.
    pub target_tokens: Vec<TokenId>,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub items: Vec<TrainingItem>,
}

impl TrainingBatch {
    pub fn count(&self, origin: Origin) -> usize {
        self.items.iter().filter(|i| i.origin == origin).count()
    }
}

/// Caption tokens plus the end marker.
pub fn caption_target(vocab: &Vocabulary, text: &str) -> Vec<TokenId> {
    let mut ids = vocab.tokenize(text);
    ids.push(PointTokenVocab::EOS);
    ids
}

/// Point tokens for `k` points sampled from a scribble; empty for the empty
/// scribble.
pub fn scribble_tokens(scribble: &crate::codec::Scribble, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
    if scribble.is_empty() {
        return Ok(Vec::new());
    }
    let pts = sample_points(scribble, k, rng)?;
    tokenize_points(&encode_points(&pts)?, &PointTokenVocab::standard())
}

/// Epoch-wise shuffled cursor over `0..len`.
#[derive(Debug, Clone)]
struct EpochCursor {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl EpochCursor {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            epoch: 0,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
            self.epoch += 1;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Endless stream of batches, each exactly half regional and half global.
///
/// Global items always carry the empty point sequence. Single consumer;
/// independent samplers with distinct seeds can run side by side.
#[derive(Debug)]
pub struct MixedBatchSampler<'a> {
    regional: &'a [RegionCaptionPair],
    global: &'a [RegionCaptionPair],
    vocab: &'a Vocabulary,
    batch_size: usize,
    k: usize,
    drop_point_tokens: bool,
    regional_only: bool,
    rng: ChaCha8Rng,
    regional_cursor: EpochCursor,
    global_cursor: EpochCursor,
}

impl<'a> MixedBatchSampler<'a> {
    pub fn new(
        regional: &'a [RegionCaptionPair],
        global: &'a [RegionCaptionPair],
        vocab: &'a Vocabulary,
        batch_size: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 || !batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size must be even and positive, got {batch_size}"
            )));
        }
        if regional.is_empty() || global.is_empty() {
            return Err(Error::Config("regional and global datasets must be non-empty".into()));
        }
        if k == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        Ok(Self {
            regional,
            global,
            vocab,
            batch_size,
            k,
            drop_point_tokens: false,
            regional_only: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            regional_cursor: EpochCursor::new(regional.len()),
            global_cursor: EpochCursor::new(global.len()),
        })
    }

    /// Ablation switch: regional items keep their captions but lose their
    /// point tokens.
    pub fn drop_point_tokens(mut self, drop: bool) -> Self {
        self.drop_point_tokens = drop;
        self
    }

    /// Comparison switch: the global half of each batch is filled with
    /// further regional items instead. Breaks the half-and-half contract on
    /// purpose; only used to measure what mixing buys.
    pub fn regional_only(mut self, on: bool) -> Self {
        self.regional_only = on;
        self
    }

    /// Completed passes over the regional set.
    pub fn regional_epoch(&self) -> usize {
        let c = &self.regional_cursor;
        match c.epoch {
            0 => 0,
            e if c.pos == c.order.len() => e,
            e => e - 1,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        let per_batch = if self.regional_only {
            self.batch_size
        } else {
            self.batch_size / 2
        };
        self.regional.len().div_ceil(per_batch)
    }

    pub fn next_batch(&mut self) -> Result<TrainingBatch> {
        let half = self.batch_size / 2;
        let mut items = Vec::with_capacity(self.batch_size);
        let regional_items = if self.regional_only { self.batch_size } else { half };
        for _ in 0..regional_items {
            let pair = &self.regional[self.regional_cursor.next(&mut self.rng)];
            let tokens = scribble_tokens(&pair.scribble, self.k, &mut self.rng)?;
            items.push(TrainingItem {
                image_id: pair.image_id.clone(),
                point_tokens: if self.drop_point_tokens { Vec::new() } else { tokens },
                target_tokens: caption_target(self.vocab, &pair.text),
                origin: Origin::Regional,
            });
        }
        for _ in regional_items..self.batch_size {
            let pair = &self.global[self.global_cursor.next(&mut self.rng)];
            items.push(TrainingItem {
                image_id: pair.image_id.clone(),
                point_tokens: Vec::new(),
                target_tokens: caption_target(self.vocab, &pair.text),
                origin: Origin::Global,
            });
        }
        Ok(TrainingBatch { items })
    }
}

impl Iterator for MixedBatchSampler<'_> {
    type Item = Result<TrainingBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}
