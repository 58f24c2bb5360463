//! Zero-shot procedures run on top of a trained bundle.

pub mod caption;
pub mod dialogue;
pub mod ris;
pub mod synthetic;
pub mod vcr;
pub mod vqa;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::{SyntheticDataset, SyntheticImage};
use crate::error::{Error, Result};

pub use caption::{caption_region, evaluate_captions, token_accuracy, CaptionRecord, CaptionReport};
pub use dialogue::{dialogue_step, DialogueReply, DialogueState, Role, Turn};
pub use ris::{
    argmin_lowest, assemble_ris, compute_miou, ris_score, ris_select, robustness_report, ProposalRecord, RisInstance,
    RisRecord, RisSelection, RobustnessRow,
};
pub use vcr::{vcr_answer, vcr_prompt, VcrAnswer, VcrRecord};
pub use vqa::{vqa_answer, vqa_prompt, VqaAnswer, VqaRecord};

/// Random stream for one evaluation instance. Depends only on the global
/// seed and the instance id, so evaluation order never matters.
pub fn instance_rng(seed: u64, instance_id: &str) -> ChaCha8Rng {
    crate::rng::rng_for(seed, instance_id)
}

/// Images addressable by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageStore {
    images: BTreeMap<String, SyntheticImage>,
}

impl ImageStore {
    pub fn new(images: impl IntoIterator<Item = SyntheticImage>) -> Self {
        Self {
            images: images.into_iter().map(|i| (i.image_id.clone(), i)).collect(),
        }
    }

    pub fn from_dataset(ds: &SyntheticDataset) -> Self {
        Self::new(ds.images.iter().cloned())
    }

    pub fn get(&self, image_id: &str) -> Result<&SyntheticImage> {
        self.images
            .get(image_id)
            .ok_or_else(|| Error::Domain(format!("unknown image id {image_id:?}")))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SyntheticImage> {
        self.images.values()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(read_jsonl::<SyntheticImage>(path)?))
    }
}

/// Reads one JSON record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
