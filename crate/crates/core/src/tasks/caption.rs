use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{PointTokenVocab, Scribble, TokenId};
use crate::data::RegionCaptionPair;
use crate::data::SyntheticImage;
use crate::error::Result;
use crate::model::ModelBundle;
use crate::tasks::{instance_rng, ImageStore};

/// Greedy caption for the region a scribble indicates. The empty scribble
/// asks for a caption of the whole image.
pub fn caption_region(
    model: &ModelBundle,
    image: &SyntheticImage,
    scribble: &Scribble,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    let tokens = model.point_tokens(scribble, rng)?;
    let ids = model.caption_tokens(&model.features(image)?, &tokens)?;
    Ok(model.vocab.detokenize(&ids))
}

/// Position-wise agreement between generated and reference token sequences,
/// pooled over all reference positions. End tokens are not counted.
pub fn token_accuracy<'a>(pairs: impl IntoIterator<Item = (&'a [TokenId], &'a [TokenId])>) -> f64 {
    let strip = |s: &'a [TokenId]| match s.last() {
        Some(&PointTokenVocab::EOS) => &s[..s.len() - 1],
        _ => s,
    };
    let (mut hit, mut total) = (0usize, 0usize);
    for (generated, reference) in pairs {
        let (g, r) = (strip(generated), strip(reference));
        total += r.len();
        hit += r.iter().zip(g).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        return 0.0;
    }
    hit as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub reference: String,
    pub generated: String,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionReport {
    pub token_accuracy: f64,
    pub records: Vec<CaptionRecord>,
}

/// Captions every pair. With `drop_points` the scribble is ignored, which is
/// how the no-points ablation is evaluated.
pub fn evaluate_captions(
    model: &ModelBundle,
    images: &ImageStore,
    pairs: &[RegionCaptionPair],
    seed: u64,
    drop_points: bool,
) -> Result<CaptionReport> {
    let mut generated = Vec::with_capacity(pairs.len());
    let mut references = Vec::with_capacity(pairs.len());
    let mut records = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let image = images.get(&pair.image_id)?;
        let mut rng = instance_rng(seed, &format!("caption/{}/{i}", pair.image_id));
        let tokens = if drop_points {
            Vec::new()
        } else {
            model.point_tokens(&pair.scribble, &mut rng)?
        };
        let ids = model.caption_tokens(&model.features(image)?, &tokens)?;
        let reference = model.vocab.tokenize(&pair.text);
        let text = model.vocab.detokenize(&ids);
        records.push(CaptionRecord {
            image_id: pair.image_id.clone(),
            reference: pair.text.clone(),
            exact: ids == reference,
            generated: text,
        });
        generated.push(ids);
        references.push(reference);
    }
    let acc = token_accuracy(
        generated
            .iter()
            .map(|g| g.as_slice())
            .zip(references.iter().map(|r| r.as_slice())),
    );
    Ok(CaptionReport {
        token_accuracy: acc,
        records,
    })
}
