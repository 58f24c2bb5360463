//! The assembled pipeline: frozen visual encoder, trainable query
//! transformer, frozen language model, and the shared vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, restore_params, save_params};
use crate::codec::{Scribble, TokenId};
use crate::data::batch::scribble_tokens;
use crate::data::{SyntheticImage, Vocabulary};
use crate::encoder::{EncoderConfig, ImageFeatures, VisualEncoder};
use crate::error::{Error, Result};
use crate::lm::{FrozenLm, LmConfig, LmParams, Prompt};
use crate::qformer::{QFormerConfig, QFormerOutput, QFormerParams};

pub const QFORMER_FILE: &str = "qformer.ckpt";
pub const LM_FILE: &str = "lm.ckpt";
pub const QFORMER_KIND: &str = "qformer";
pub const LM_KIND: &str = "lm";

/// Generation cap for captions and answers.
pub const MAX_GENERATION: usize = 16;

/// Everything besides tensors that a query-transformer checkpoint records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleExtras {
    vocab: Vocabulary,
    encoder: EncoderConfig,
    k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LmExtras {
    seal: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub vocab: Vocabulary,
    pub encoder: VisualEncoder,
    pub qformer: QFormerParams<f32>,
    pub lm: FrozenLm<f32>,
    /// Points sampled per scribble.
    pub k: usize,
    pub seed: u64,
}

impl ModelBundle {
    pub fn new(
        vocab: Vocabulary,
        encoder: EncoderConfig,
        qformer: QFormerConfig,
        lm: LmConfig,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        if qformer.feature_dim != encoder.feature_dim {
            return Err(Error::Config(
                "query transformer feature_dim must match the encoder".into(),
            ));
        }
        if qformer.output_dim != lm.width {
            return Err(Error::Config(
                "query transformer output_dim must match the language model width".into(),
            ));
        }
        if lm.vocab_size != vocab.len() {
            return Err(Error::Config(
                "language model vocabulary size must match the vocabulary".into(),
            ));
        }
        let lm_seed = crate::rng::derive_seed(seed, "lm");
        let qf_seed = crate::rng::derive_seed(seed, "qformer");
        Ok(Self {
            vocab,
            encoder: VisualEncoder::new(encoder)?,
            qformer: QFormerParams::new(qformer, qf_seed)?,
            lm: FrozenLm::seal(LmParams::new(lm, lm_seed)?),
            k,
            seed,
        })
    }

    pub fn features(&self, image: &SyntheticImage) -> Result<ImageFeatures<f32>> {
        self.encoder.encode(image)
    }

    pub fn point_tokens(&self, scribble: &Scribble, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
        scribble_tokens(scribble, self.k, rng)
    }

    pub fn region(&self, features: &ImageFeatures<f32>, tokens: &[TokenId]) -> Result<QFormerOutput<f32>> {
        Ok(self.qformer.forward(tokens, features)?.0)
    }

    /// Greedy caption for a region; the end token is stripped.
    pub fn caption_tokens(&self, features: &ImageFeatures<f32>, tokens: &[TokenId]) -> Result<Vec<TokenId>> {
        let z = self.region(features, tokens)?.z_hat;
        let mut out = self.lm.generate(&Prompt::soft(z), MAX_GENERATION)?;
        if out.last() == Some(&crate::codec::PointTokenVocab::EOS) {
            out.pop();
        }
        Ok(out)
    }

    /// Mean loss of `target` (which should end in the end token) given the
    /// region's soft prompt.
    pub fn region_loss(&self, features: &ImageFeatures<f32>, tokens: &[TokenId], target: &[TokenId]) -> Result<f32> {
        let z = self.region(features, tokens)?.z_hat;
        Ok(self.lm.loss(&Prompt::soft(z), target)?.0)
    }

    /// Writes the trainable half of the bundle to `path`.
    pub fn save_qformer(&self, path: &Path) -> Result<()> {
        let extras = BundleExtras {
            vocab: self.vocab.clone(),
            encoder: self.encoder.config().clone(),
            k: self.k,
        };
        save_params(
            path,
            QFORMER_KIND,
            &self.qformer.config,
            self.seed,
            serde_json::to_value(extras)?,
            &self.qformer,
        )
    }

    pub fn save_lm(&self, path: &Path) -> Result<()> {
        let extras = LmExtras {
            seal: self.lm.seal_checksum().to_string(),
        };
        save_params(
            path,
            LM_KIND,
            self.lm.config(),
            self.seed,
            serde_json::to_value(extras)?,
            self.lm.params(),
        )
    }

    /// Writes both checkpoints into `dir` under their standard names.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.save_qformer(&dir.join(QFORMER_FILE))?;
        self.save_lm(&dir.join(LM_FILE))
    }

    /// Loads a run directory written by [`ModelBundle::save`] or the trainer.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_from(&dir.join(QFORMER_FILE), &dir.join(LM_FILE))
    }

    pub fn load_from(qformer_path: &Path, lm_path: &Path) -> Result<Self> {
        let (qh, qt) = read_checkpoint(qformer_path)?;
        let qcfg: QFormerConfig = serde_json::from_value(qh.config.clone())?;
        let extras: BundleExtras = serde_json::from_value(qh.extras.clone())?;
        let mut qformer = QFormerParams::new(qcfg, 0)?;
        restore_params(&qh, qt, QFORMER_KIND, &mut qformer)?;

        let (lh, lt) = read_checkpoint(lm_path)?;
        let lcfg: LmConfig = serde_json::from_value(lh.config.clone())?;
        let lextras: LmExtras = serde_json::from_value(lh.extras.clone())?;
        let mut lm = LmParams::new(lcfg, 0)?;
        restore_params(&lh, lt, LM_KIND, &mut lm)?;
        let lm = FrozenLm::from_sealed(lm, &lextras.seal)?;

        if qformer.config.output_dim != lm.config().width || lm.config().vocab_size != extras.vocab.len() {
            return Err(Error::Shape("checkpoints do not belong together".into()));
        }
        Ok(Self {
            vocab: extras.vocab,
            encoder: VisualEncoder::new(extras.encoder)?,
            qformer,
            lm,
            k: extras.k,
            seed: qh.seed,
        })
    }
}

/// Encoded features keyed by image id, computed once per image.
#[derive(Debug, Default)]
pub struct FeatureCache {
    map: HashMap<String, ImageFeatures<f32>>,
}

impl FeatureCache {
    pub fn build<'a>(encoder: &VisualEncoder, images: impl IntoIterator<Item = &'a SyntheticImage>) -> Result<Self> {
        let mut map = HashMap::new();
        for img in images {
            map.insert(img.image_id.clone(), encoder.encode(img)?);
        }
        Ok(Self { map })
    }

    pub fn get(&self, image_id: &str) -> Result<&ImageFeatures<f32>> {
        self.map
            .get(image_id)
            .ok_or_else(|| Error::Domain(format!("unknown image id {image_id:?}")))
    }
}
