//! Multiple-choice questions about indexed objects.

use serde::{Deserialize, Serialize};

use crate::codec::{encode_points, sample_points_in_mask, tokenize_points, PointTokenVocab};
use crate::data::{caption_target, SyntheticImage, Vocabulary};
use crate::error::{Error, Result};
use crate::lm::Prompt;
use crate::mask::{Mask, RleMask};
use crate::model::ModelBundle;
use crate::tasks::{argmin_lowest, instance_rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VcrRecord {
    pub id: String,
    pub image_id: String,
    /// Object `k` is referred to as `[k]` in the question and choices.
    pub objects: Vec<RleMask>,
    pub question: String,
    pub choices: [String; 4],
    /// Correct choice, 1 through 4.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcrAnswer {
    /// Chosen option, 1 through 4.
    pub choice: usize,
    /// Length-normalized loss of each choice, in order.
    pub scores: [f64; 4],
    pub prompt: String,
}

/// Indices `k` of every `[k]` placeholder in `text`.
pub fn placeholders(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        rest = &rest[open + 1..];
        if let Some(close) = rest.find(']') {
            if let Ok(k) = rest[..close].parse::<usize>() {
                if !rest[..close].is_empty() && rest[..close].bytes().all(|b| b.is_ascii_digit()) {
                    out.push(k);
                }
            }
        }
    }
    out
}

fn choice_list(choices: &[String]) -> String {
    choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {c}", i + 1))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `[0]: Z0 [1]: Z1, question 1. a 2. b 3. c 4. d`, with each `Z` a soft
/// segment.
pub fn vcr_prompt(
    objects: &[Tensor<f32>],
    question: &str,
    choices: &[String],
    vocab: &Vocabulary,
) -> Result<Prompt<f32>> {
    let texts = std::iter::once(question).chain(choices.iter().map(String::as_str));
    for t in texts {
        if let Some(&k) = placeholders(t).iter().find(|&&k| k >= objects.len()) {
            return Err(Error::Domain(format!(
                "placeholder [{k}] but only {} objects",
                objects.len()
            )));
        }
    }
    let mut prompt = Prompt::new();
    for (k, z) in objects.iter().enumerate() {
        prompt = prompt.with_text(vocab, &format!("[{k}]:")).with_soft(z.clone());
    }
    let lead = if objects.is_empty() { "" } else { ", " };
    let tail = format!("{lead}{question} {}", choice_list(choices));
    Ok(prompt.with_text(vocab, tail.trim_end()))
}

/// Soft prompt for a mask, from points sampled inside it.
fn object_prompt(
    model: &ModelBundle,
    image: &SyntheticImage,
    mask: &Mask,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let tokens = if mask.is_empty() {
        Vec::new()
    } else {
        let pts = sample_points_in_mask(mask, model.k, rng)?;
        tokenize_points(&encode_points(&pts)?, &PointTokenVocab::standard())?
    };
    Ok(model.region(&model.features(image)?, &tokens)?.z_hat)
}

pub fn vcr_answer(model: &ModelBundle, image: &SyntheticImage, record: &VcrRecord, seed: u64) -> Result<VcrAnswer> {
    let mut rng = instance_rng(seed, &record.id);
    let masks = record.objects.iter().map(Mask::from_rle).collect::<Result<Vec<_>>>()?;
    let zs = masks
        .iter()
        .map(|m| object_prompt(model, image, m, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let prompt = vcr_prompt(&zs, &record.question, &record.choices, &model.vocab)?;
    let mut scores = [0.0; 4];
    for (s, choice) in scores.iter_mut().zip(&record.choices) {
        // Mean per-token loss, so long choices are not penalized.
        *s = model.lm.loss(&prompt, &caption_target(&model.vocab, choice))?.0 as f64;
    }
    let choice = argmin_lowest(&scores).ok_or_else(|| Error::NonFinite {
        step: 0,
        detail: format!("all choice scores non-finite for {}", record.id),
    })? + 1;
    Ok(VcrAnswer {
        choice,
        scores,
        prompt: prompt.render(),
    })
}
