//! Dataset ingestion, vocabulary, synthetic scenes, and batch assembly.

pub mod batch;
pub mod narrative;
pub mod synthetic;
pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::codec::Scribble;

pub use batch::{caption_target, MixedBatchSampler, Origin, TrainingBatch, TrainingItem};
pub use narrative::{
    align_segments_to_trace, pairs_from_bboxes, parse_box_captions, parse_narratives, split_caption, Alignment,
    BoxCaption, CaptionSegment, NarrativeRecord, ParsedNarratives, TracePoint, Utterance,
};
pub use synthetic::{make_synthetic_dataset, SceneObject, SyntheticConfig, SyntheticDataset, SyntheticImage};
pub use vocab::Vocabulary;

/// One training example: a region indication and the text describing it.
/// Global pairs carry the empty scribble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCaptionPair {
    pub image_id: String,
    pub scribble: Scribble,
    pub text: String,
}

/// Descriptive counts over a pair set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pairs: usize,
    pub images: usize,
    pub empty_scribbles: usize,
    pub mean_points: f64,
    pub mean_words: f64,
}

pub fn dataset_stats(pairs: &[RegionCaptionPair]) -> DatasetStats {
    let images: std::collections::BTreeSet<&str> = pairs.iter().map(|p| p.image_id.as_str()).collect();
    let n = pairs.len().max(1) as f64;
    DatasetStats {
        pairs: pairs.len(),
        images: images.len(),
        empty_scribbles: pairs.iter().filter(|p| p.scribble.is_empty()).count(),
        mean_points: pairs.iter().map(|p| p.scribble.len()).sum::<usize>() as f64 / n,
        mean_words: pairs.iter().map(|p| vocab::split_words(&p.text).len()).sum::<usize>() as f64 / n,
    }
}
