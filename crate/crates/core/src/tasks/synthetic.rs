//! Evaluation instances derived from synthetic scenes, where the right
//! answer is known by construction.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::SyntheticDataset;
use crate::tasks::instance_rng;
use crate::tasks::ris::{ProposalRecord, RisRecord};
use crate::tasks::vcr::VcrRecord;
use crate::tasks::vqa::VqaRecord;

/// One proposal per object (shuffled per image) and one instance per object
/// of every image with at least two objects.
pub fn synthetic_ris(ds: &SyntheticDataset, seed: u64) -> (Vec<RisRecord>, Vec<ProposalRecord>) {
    let mut records = Vec::new();
    let mut proposals = Vec::new();
    for img in ds.images.iter().filter(|i| i.objects.len() >= 2) {
        let mut order: Vec<usize> = (0..img.objects.len()).collect();
        order.shuffle(&mut instance_rng(seed, &format!("proposals/{}", img.image_id)));
        for (index, &o) in order.iter().enumerate() {
            proposals.push(ProposalRecord::from_mask(
                &img.image_id,
                index,
                &img.objects[o].mask(img.grid),
                Some("synthetic"),
            ));
        }
        for (k, obj) in img.objects.iter().enumerate() {
            records.push(RisRecord {
                id: format!("ris-{}-{k}", img.image_id),
                image_id: img.image_id.clone(),
                description: obj.caption(),
                ground_truth: Some(obj.mask(img.grid).to_rle()),
            });
        }
    }
    (records, proposals)
}

/// "what is [0] ?" with the true caption among three distractors.
pub fn synthetic_vcr(ds: &SyntheticDataset, seed: u64) -> Vec<VcrRecord> {
    let colors = &ds.config.colors;
    let shapes = &ds.config.shapes;
    let mut out = Vec::new();
    for img in ds.images.iter().filter(|i| i.objects.len() >= 2) {
        let mut rng = instance_rng(seed, &format!("vcr/{}", img.image_id));
        let (a, b) = (&img.objects[0], &img.objects[1]);
        let truth = a.caption();
        let mut choices = vec![truth.clone(), b.caption()];
        while choices.len() < 4 {
            let c = format!(
                "{} {}",
                colors[rng.random_range(0..colors.len())],
                shapes[rng.random_range(0..shapes.len())]
            );
            if !choices.contains(&c) {
                choices.push(c);
            }
        }
        choices.shuffle(&mut rng);
        let answer = choices.iter().position(|c| *c == truth).expect("truth kept") + 1;
        out.push(VcrRecord {
            id: format!("vcr-{}", img.image_id),
            image_id: img.image_id.clone(),
            objects: vec![a.mask(img.grid).to_rle(), b.mask(img.grid).to_rle()],
            question: "what is [0] ?".into(),
            choices: choices.try_into().expect("four choices"),
            answer: Some(answer),
        });
    }
    out
}

/// "what color is the <shape>" about one object per image.
pub fn synthetic_vqa(ds: &SyntheticDataset, seed: u64) -> Vec<VqaRecord> {
    ds.images
        .iter()
        .filter(|i| !i.objects.is_empty())
        .map(|img| {
            let mut rng = instance_rng(seed, &format!("vqa/{}", img.image_id));
            let obj = &img.objects[rng.random_range(0..img.objects.len())];
            VqaRecord {
                id: format!("vqa-{}", img.image_id),
                image_id: img.image_id.clone(),
                question: format!("what color is the {}", obj.shape),
                answer: Some(obj.color.clone()),
            }
        })
        .collect()
}
