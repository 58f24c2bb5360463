//! Referring segmentation by proposal ranking.
//!
//! Each proposal is turned into a point prompt, and the referring
//! expression's language-model loss under that prompt is its score. Lowest
//! score wins.

use serde::{Deserialize, Serialize};

use crate::codec::{encode_points, sample_points_in_mask, tokenize_points, PointTokenVocab};
use crate::data::caption_target;
use crate::data::SyntheticImage;
use crate::encoder::ImageFeatures;
use crate::error::{Error, Result};
use crate::mask::{Mask, RleMask};
use crate::model::ModelBundle;
use crate::rng::{derive_seed, rng_for};
use crate::tasks::ImageStore;

/// One line of a proposal file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalRecord {
    pub image_id: String,
    pub index: usize,
    pub dims: [usize; 2],
    pub rle: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl ProposalRecord {
    pub fn from_mask(image_id: &str, index: usize, mask: &Mask, source: Option<&str>) -> Self {
        let r = mask.to_rle();
        Self {
            image_id: image_id.to_string(),
            index,
            dims: r.dims,
            rle: r.rle,
            source: source.map(str::to_string),
        }
    }

    pub fn mask(&self) -> Result<Mask> {
        Mask::from_rle(&RleMask {
            dims: self.dims,
            rle: self.rle.clone(),
        })
    }
}

/// One line of an RIS instance file. Proposals come from the proposal file,
/// matched on `image_id` and ordered by index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RisRecord {
    pub id: String,
    pub image_id: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<RleMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RisInstance {
    pub id: String,
    pub image_id: String,
    pub proposals: Vec<Mask>,
    pub description: String,
    pub ground_truth: Option<Mask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RisSelection {
    pub index: usize,
    /// One score per proposal; unusable proposals score `+inf`.
    pub scores: Vec<f64>,
}

/// Joins instance records with their proposals.
pub fn assemble_ris(records: &[RisRecord], proposals: &[ProposalRecord]) -> Result<Vec<RisInstance>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut props: Vec<&ProposalRecord> = proposals.iter().filter(|p| p.image_id == r.image_id).collect();
        props.sort_by_key(|p| p.index);
        if props.is_empty() {
            return Err(Error::Domain(format!("instance {} has no proposals", r.id)));
        }
        out.push(RisInstance {
            id: r.id.clone(),
            image_id: r.image_id.clone(),
            proposals: props.iter().map(|p| p.mask()).collect::<Result<_>>()?,
            description: r.description.clone(),
            ground_truth: r.ground_truth.as_ref().map(Mask::from_rle).transpose()?,
        });
    }
    Ok(out)
}

/// Index of the smallest finite score; the lowest index wins ties.
pub fn argmin_lowest(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            continue;
        }
        if best.is_none_or(|b| s < scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// The referring expression's loss given a prompt built from points sampled
/// in the proposal. The point sample is keyed by the proposal's content, so
/// a proposal scores the same wherever it sits in the list.
pub fn ris_score(
    model: &ModelBundle,
    features: &ImageFeatures<f32>,
    proposal: &Mask,
    description: &str,
    seed: u64,
    instance_id: &str,
) -> Result<f64> {
    if proposal.is_empty() {
        return Ok(f64::INFINITY);
    }
    let rle = serde_json::to_string(&proposal.to_rle())?;
    let mut rng = rng_for(derive_seed(seed, instance_id), &rle);
    let pts = sample_points_in_mask(proposal, model.k, &mut rng)?;
    let tokens = tokenize_points(&encode_points(&pts)?, &PointTokenVocab::standard())?;
    let target = caption_target(&model.vocab, description);
    Ok(model.region_loss(features, &tokens, &target)? as f64)
}

pub fn ris_scores(
    model: &ModelBundle,
    image: &SyntheticImage,
    instance: &RisInstance,
    proposals: &[Mask],
    seed: u64,
) -> Result<Vec<f64>> {
    let features = model.features(image)?;
    proposals
        .iter()
        .map(|m| ris_score(model, &features, m, &instance.description, seed, &instance.id))
        .collect()
}

pub fn ris_select(
    model: &ModelBundle,
    image: &SyntheticImage,
    instance: &RisInstance,
    seed: u64,
) -> Result<RisSelection> {
    select_among(model, image, instance, &instance.proposals, seed)
}

fn select_among(
    model: &ModelBundle,
    image: &SyntheticImage,
    instance: &RisInstance,
    proposals: &[Mask],
    seed: u64,
) -> Result<RisSelection> {
    if proposals.is_empty() {
        return Err(Error::Domain(format!("instance {} has no proposals", instance.id)));
    }
    let scores = ris_scores(model, image, instance, proposals, seed)?;
    let index = argmin_lowest(&scores)
        .ok_or_else(|| Error::Domain(format!("instance {} has no usable proposal", instance.id)))?;
    Ok(RisSelection { index, scores })
}

/// Mean IoU over prediction/ground-truth pairs.
pub fn compute_miou(predictions: &[Mask], ground_truths: &[Mask]) -> Result<f64> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Domain("mIoU of zero instances".into()));
    }
    let mut total = 0.0;
    for (p, g) in predictions.iter().zip(ground_truths) {
        total += p.iou(g)?;
    }
    Ok(total / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub radius: usize,
    pub miou: f64,
}

/// For each radius, selects among dilated proposals and scores the original
/// proposal at the chosen index against the ground truth. Rows come back in
/// ascending radius order.
pub fn robustness_report(
    model: &ModelBundle,
    images: &ImageStore,
    instances: &[RisInstance],
    radii: &[usize],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    if instances.iter().any(|i| i.ground_truth.is_none()) {
        return Err(Error::Domain("robustness evaluation needs ground-truth masks".into()));
    }
    let mut radii = radii.to_vec();
    radii.sort_unstable();
    radii.dedup();
    let mut rows = Vec::with_capacity(radii.len());
    for &r in &radii {
        let mut preds = Vec::with_capacity(instances.len());
        let mut gts = Vec::with_capacity(instances.len());
        for inst in instances {
            let dilated: Vec<Mask> = inst.proposals.iter().map(|m| m.dilate(r)).collect();
            let sel = select_among(model, images.get(&inst.image_id)?, inst, &dilated, seed)?;
            preds.push(inst.proposals[sel.index].clone());
            gts.push(inst.ground_truth.clone().expect("checked above"));
        }
        rows.push(RobustnessRow {
            radius: r,
            miou: compute_miou(&preds, &gts)?,
        });
    }
    Ok(rows)
}
