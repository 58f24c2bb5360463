//! Multi-turn exchanges where any user turn may carry a scribble.
//!
//! The prompt places soft rows for every scribbled turn (oldest first, the
//! current turn last) ahead of the serialized history and the new query.
//! When that does not fit the context, whole exchanges are dropped from the
//! front.

use serde::{Deserialize, Serialize};

use crate::codec::{PointTokenVocab, Scribble};
use crate::data::SyntheticImage;
use crate::error::{Error, Result};
use crate::lm::Prompt;
use crate::model::{ModelBundle, MAX_GENERATION};
use crate::rng::derive_seed;
use crate::tasks::instance_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scribble: Option<Scribble>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DialogueState {
    pub turns: Vec<Turn>,
}

impl DialogueState {
    /// Turns must alternate, starting with the user; only user turns carry
    /// scribbles.
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.turns.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::Model };
            if t.role != want {
                return Err(Error::Domain(format!("turn {i} should be from {want:?}")));
            }
            if t.role == Role::Model && t.scribble.is_some() {
                return Err(Error::Domain(format!("model turn {i} carries a scribble")));
            }
        }
        if !self.turns.len().is_multiple_of(2) {
            return Err(Error::Domain("history ends with an unanswered user turn".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueReply {
    pub text: String,
    pub state: DialogueState,
    /// Set when older exchanges were left out of the prompt to fit.
    pub truncated: bool,
    pub prompt: String,
}

fn serialize_history(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| match t.role {
            Role::User => format!("user: {}", t.text),
            Role::Model => format!("model: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Soft rows for a user turn; turns without a scribble contribute nothing.
fn turn_rows(
    model: &ModelBundle,
    image: &SyntheticImage,
    scribble: &Scribble,
    seed: u64,
    turn: usize,
) -> Result<Tensor<f32>> {
    let mut rng = instance_rng(seed, &format!("turn/{turn}"));
    let tokens = model.point_tokens(scribble, &mut rng)?;
    Ok(model.region(&model.features(image)?, &tokens)?.z_hat)
}

fn build_prompt(
    model: &ModelBundle,
    image: &SyntheticImage,
    history: &[Turn],
    first_turn: usize,
    query: &str,
    current: &Tensor<f32>,
    seed: u64,
) -> Result<Prompt<f32>> {
    let mut prompt = Prompt::new();
    for (i, t) in history.iter().enumerate() {
        if let Some(s) = t.scribble.as_ref().filter(|s| !s.is_empty()) {
            prompt = prompt.with_soft(turn_rows(model, image, s, seed, first_turn + i)?);
        }
    }
    prompt = prompt.with_soft(current.clone());
    if !history.is_empty() {
        prompt = prompt.with_text(&model.vocab, &serialize_history(history));
    }
    if !query.is_empty() {
        prompt = prompt.with_text(&model.vocab, query);
    }
    Ok(prompt)
}

/// Answers `query` given the conversation so far. The current turn's soft
/// rows come from `scribble`, or from the whole image without one.
pub fn dialogue_step(
    model: &ModelBundle,
    image: &SyntheticImage,
    state: &DialogueState,
    query: &str,
    scribble: Option<&Scribble>,
    seed: u64,
) -> Result<DialogueReply> {
    state.validate()?;
    let turn_index = state.turns.len();
    let seed = derive_seed(seed, &image.image_id);
    let current = turn_rows(model, image, scribble.unwrap_or(&Scribble::empty()), seed, turn_index)?;
    let limit = model.lm.config().context;

    let mut start = 0;
    let prompt = loop {
        let p = build_prompt(model, image, &state.turns[start..], start, query, &current, seed)?;
        if p.len() + MAX_GENERATION <= limit {
            break p;
        }
        if start >= state.turns.len() {
            return Err(Error::ContextOverflow {
                len: p.len() + MAX_GENERATION,
                limit,
            });
        }
        start += 2;
    };

    let mut ids = model.lm.generate(&prompt, MAX_GENERATION)?;
    if ids.last() == Some(&PointTokenVocab::EOS) {
        ids.pop();
    }
    let text = model.vocab.detokenize(&ids);
    let mut next = state.clone();
    next.turns.push(Turn {
        role: Role::User,
        text: query.to_string(),
        scribble: scribble.cloned(),
    });
    next.turns.push(Turn {
        role: Role::Model,
        text: text.clone(),
        scribble: None,
    });
    Ok(DialogueReply {
        text,
        state: next,
        truncated: start > 0,
        prompt: prompt.render(),
    })
}

/// The random stream [`dialogue_step`] uses for the scribble of turn
/// `turn`, for callers that want to reproduce a turn's point sample.
pub fn turn_rng(seed: u64, image_id: &str, turn: usize) -> rand_chacha::ChaCha8Rng {
    instance_rng(derive_seed(seed, image_id), &format!("turn/{turn}"))
}
