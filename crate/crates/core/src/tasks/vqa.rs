use serde::{Deserialize, Serialize};

use crate::codec::{PointTokenVocab, Scribble};
use crate::data::{SyntheticImage, Vocabulary};
use crate::error::Result;
use crate::lm::Prompt;
use crate::model::{ModelBundle, MAX_GENERATION};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaRecord {
    pub id: String,
    pub image_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaAnswer {
    pub answer: String,
    /// Rendered prompt, soft rows shown as placeholders.
    pub prompt: String,
    /// Always zero: questions are asked about the whole image.
    pub point_tokens: usize,
}

pub fn question_text(question: &str) -> String {
    format!("Question: {question} Answer:")
}

/// Whole-image soft prompt followed by the question template.
pub fn vqa_prompt(z_global: Tensor<f32>, question: &str, vocab: &Vocabulary) -> Prompt<f32> {
    Prompt::soft(z_global).with_text(vocab, &question_text(question))
}

pub fn vqa_answer(model: &ModelBundle, image: &SyntheticImage, question: &str) -> Result<VqaAnswer> {
    // The empty scribble: no point tokens reach the query transformer.
    let scribble = Scribble::empty();
    let tokens = model.point_tokens(&scribble, &mut crate::rng::rng_for(0, "vqa"))?;
    assert!(tokens.is_empty(), "visual questions never carry point tokens");
    let z = model.region(&model.features(image)?, &tokens)?.z_hat;
    let prompt = vqa_prompt(z, question, &model.vocab);
    let mut ids = model.lm.generate(&prompt, MAX_GENERATION)?;
    if ids.last() == Some(&PointTokenVocab::EOS) {
        ids.pop();
    }
    Ok(VqaAnswer {
        answer: model.vocab.detokenize(&ids),
        prompt: prompt.render(),
        point_tokens: tokens.len(),
    })
}
