//! Tiny causal decoder standing in for the frozen language model.
//!
//! Pre-norm blocks, tied input/output embeddings. Once sealed the weights are
//! only reachable through shared references, and the backward pass computes
//! gradients with respect to the input rows alone: there is no code path that
//! produces parameter gradients for this model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::param_checksum;
use crate::codec::{PointTokenVocab, TokenId};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{
    add_into, add_vec, normal_tensor, Attention, AttentionCache, FeedForward, FeedForwardCache, LayerNorm,
    LayerNormCache, ParamSet,
};
use crate::tensor::{log_sum_exp, matmul, matmul_bt, softmax_in_place, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub context: usize,
}

impl LmConfig {
    pub fn for_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            width: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 64,
            context: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [
            self.vocab_size,
            self.width,
            self.layers,
            self.heads,
            self.ffn_dim,
            self.context,
        ]
        .contains(&0)
        {
            return Err(Error::Config("language model dimensions must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config("language model width not divisible by heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmLayer<T> {
    pub attn_norm: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> ParamSet<T> for LmLayer<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.attn_norm.tensors(&format!("{prefix}attn_norm."), out);
        self.attn.tensors(&format!("{prefix}attn."), out);
        self.ffn_norm.tensors(&format!("{prefix}ffn_norm."), out);
        self.ffn.tensors(&format!("{prefix}ffn."), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.attn_norm.tensors_mut(&format!("{prefix}attn_norm."), out);
        self.attn.tensors_mut(&format!("{prefix}attn."), out);
        self.ffn_norm.tensors_mut(&format!("{prefix}ffn_norm."), out);
        self.ffn.tensors_mut(&format!("{prefix}ffn."), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<T> {
    pub config: LmConfig,
    /// Shared between input embedding and output head.
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub layers: Vec<LmLayer<T>>,
    pub final_norm: LayerNorm<T>,
}

impl<T: Scalar> ParamSet<T> for LmParams<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}token_embedding"), &self.token_embedding));
        out.push((format!("{prefix}position_embedding"), &self.position_embedding));
        for (i, l) in self.layers.iter().enumerate() {
            l.tensors(&format!("{prefix}layers.{i}."), out);
        }
        self.final_norm.tensors(&format!("{prefix}final_norm."), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}token_embedding"), &mut self.token_embedding));
        out.push((format!("{prefix}position_embedding"), &mut self.position_embedding));
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.tensors_mut(&format!("{prefix}layers.{i}."), out);
        }
        self.final_norm.tensors_mut(&format!("{prefix}final_norm."), out);
    }
}

impl<T: Scalar> LmParams<T> {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.clone();
        let token_embedding = normal_tensor(&[c.vocab_size, c.width], 0.5, &mut rng);
        let position_embedding = normal_tensor(&[c.context, c.width], 0.1, &mut rng);
        let layers = (0..c.layers)
            .map(|_| LmLayer {
                attn_norm: LayerNorm::new(c.width),
                attn: Attention::new(c.width, c.width, c.heads, &mut rng),
                ffn_norm: LayerNorm::new(c.width),
                ffn: FeedForward::new(c.width, c.ffn_dim, &mut rng),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm: LayerNorm::new(c.width),
        })
    }
}

/// One prompt piece: continuous rows placed directly in the input, or text.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment<T> {
    Soft(Tensor<T>),
    Text { text: String, ids: Vec<TokenId> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prompt<T> {
    pub segments: Vec<Segment<T>>,
}

impl<T: Scalar> Prompt<T> {
    pub fn new() -> Self {
        Self { segments: Vec::new() }
    }

    pub fn soft(rows: Tensor<T>) -> Self {
        Self::new().with_soft(rows)
    }

    pub fn with_soft(mut self, rows: Tensor<T>) -> Self {
        self.segments.push(Segment::Soft(rows));
        self
    }

    pub fn with_text(mut self, vocab: &Vocabulary, text: &str) -> Self {
        self.segments.push(Segment::Text {
            text: text.to_string(),
            ids: vocab.tokenize(text),
        });
        self
    }

    pub fn len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Soft(t) => {
                    if t.is_empty() {
                        0
                    } else {
                        t.rows()
                    }
                }
                Segment::Text { ids, .. } => ids.len(),
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn soft_segments(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Soft(t) => Some(t),
            Segment::Text { .. } => None,
        })
    }

    /// Segment kinds in order, `"soft"` or `"text"`.
    pub fn kinds(&self) -> Vec<&'static str> {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Soft(_) => "soft",
                Segment::Text { .. } => "text",
            })
            .collect()
    }

    /// Stable human-readable form; soft segments render as `<soft:ROWS>`.
    pub fn render(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Soft(t) => format!("<soft:{}>", if t.is_empty() { 0 } else { t.rows() }),
                Segment::Text { text, .. } => text.clone(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

struct LmLayerCache<T> {
    input: Vec<T>,
    attn_norm_out: Vec<T>,
    attn_norm: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ffn_norm_out: Vec<T>,
    ffn_norm: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
}

struct LmForward<T> {
    seq: usize,
    layers: Vec<LmLayerCache<T>>,
    final_out: Vec<T>,
    final_norm: LayerNormCache<T>,
}

/// Row ranges of soft segments inside the input sequence.
struct Layout {
    soft_rows: Vec<(usize, usize)>,
    prompt_len: usize,
}

/// A language model whose weights can no longer change.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLm<T> {
    params: LmParams<T>,
    seal: String,
}

impl<T: Scalar> FrozenLm<T> {
    pub fn seal(params: LmParams<T>) -> Self {
        let seal = param_checksum(&params);
        Self { params, seal }
    }

    /// Rebuilds a frozen model from stored weights, checking the recorded
    /// seal.
    pub fn from_sealed(params: LmParams<T>, seal: &str) -> Result<Self> {
        let lm = Self::seal(params);
        if lm.seal != seal {
            return Err(Error::Checksum("frozen language model seal".into()));
        }
        Ok(lm)
    }

    pub fn params(&self) -> &LmParams<T> {
        &self.params
    }

    pub fn config(&self) -> &LmConfig {
        &self.params.config
    }

    pub fn seal_checksum(&self) -> &str {
        &self.seal
    }

    pub fn verify_seal(&self) -> bool {
        param_checksum(&self.params) == self.seal
    }

    pub fn cast<U: Scalar>(&self) -> FrozenLm<U> {
        let mut p = LmParams::<U>::new(self.params.config.clone(), 0).expect("validated config");
        self.params.cast_params(&mut p);
        FrozenLm::seal(p)
    }

    fn width(&self) -> usize {
        self.params.config.width
    }

    /// Embeds prompt segments followed by `suffix` tokens. An empty prompt is
    /// replaced by a single begin-of-sequence token.
    fn embed(&self, prompt: &Prompt<T>, suffix: &[TokenId]) -> Result<(Vec<T>, Layout)> {
        let w = self.width();
        let v = self.params.config.vocab_size;
        let mut rows = Vec::new();
        let mut soft_rows = Vec::new();
        let mut pos = 0usize;
        let push_ids = |ids: &[TokenId], rows: &mut Vec<T>, pos: &mut usize| -> Result<()> {
            for &id in ids {
                if id as usize >= v {
                    return Err(Error::UnknownToken(id));
                }
                rows.extend_from_slice(self.params.token_embedding.row(id as usize));
                *pos += 1;
            }
            Ok(())
        };
        for seg in &prompt.segments {
            match seg {
                Segment::Soft(t) => {
                    let n = if t.is_empty() { 0 } else { t.rows() };
                    if n > 0 && t.cols() != w {
                        return Err(Error::Shape(format!(
                            "soft rows of width {} for a width-{w} model",
                            t.cols()
                        )));
                    }
                    soft_rows.push((pos, n));
                    rows.extend_from_slice(t.data());
                    pos += n;
                }
                Segment::Text { ids, .. } => push_ids(ids, &mut rows, &mut pos)?,
            }
        }
        if pos == 0 {
            push_ids(&[PointTokenVocab::BOS], &mut rows, &mut pos)?;
        }
        let prompt_len = pos;
        push_ids(suffix, &mut rows, &mut pos)?;
        let limit = self.params.config.context;
        if pos > limit {
            return Err(Error::ContextOverflow { len: pos, limit });
        }
        for (i, row) in rows.chunks_mut(w).enumerate() {
            add_into(row, self.params.position_embedding.row(i));
        }
        Ok((rows, Layout { soft_rows, prompt_len }))
    }

    fn forward(&self, x: Vec<T>) -> LmForward<T> {
        let w = self.width();
        let seq = x.len() / w;
        let mut h = x;
        let mut layers = Vec::with_capacity(self.params.layers.len());
        for layer in &self.params.layers {
            let (a_in, attn_norm) = layer.attn_norm.forward(&h, seq);
            let (a_out, attn) = layer.attn.forward(&a_in, seq, &a_in, seq, true);
            let mid = add_vec(&h, &a_out);
            let (f_in, ffn_norm) = layer.ffn_norm.forward(&mid, seq);
            let (f_out, ffn) = layer.ffn.forward(&f_in, seq);
            let out = add_vec(&mid, &f_out);
            layers.push(LmLayerCache {
                input: std::mem::replace(&mut h, out),
                attn_norm_out: a_in,
                attn_norm,
                attn,
                ffn_norm_out: f_in,
                ffn_norm,
                ffn,
            });
        }
        let (final_out, final_norm) = self.params.final_norm.forward(&h, seq);
        LmForward {
            seq,
            layers,
            final_out,
            final_norm,
        }
    }

    /// Logits for rows `start..start+count` of a forward pass.
    fn logits(&self, fwd: &LmForward<T>, start: usize, count: usize) -> Vec<T> {
        let w = self.width();
        let v = self.params.config.vocab_size;
        matmul_bt(
            &fwd.final_out[start * w..(start + count) * w],
            self.params.token_embedding.data(),
            count,
            w,
            v,
        )
    }

    /// Next-token logits at every position of the prompt (`prompt_len x V`).
    pub fn prompt_logits(&self, prompt: &Prompt<T>) -> Result<Tensor<T>> {
        let (x, layout) = self.embed(prompt, &[])?;
        let fwd = self.forward(x);
        let v = self.params.config.vocab_size;
        Tensor::matrix(layout.prompt_len, v, self.logits(&fwd, 0, layout.prompt_len))
    }

    /// Mean cross-entropy of `target` given the prompt, plus the `T x V`
    /// logits that predicted each target token.
    pub fn loss(&self, prompt: &Prompt<T>, target: &[TokenId]) -> Result<(T, Tensor<T>)> {
        if target.is_empty() {
            return Err(Error::Domain("target must be non-empty".into()));
        }
        let (x, layout) = self.embed(prompt, &target[..target.len() - 1])?;
        let fwd = self.forward(x);
        let v = self.params.config.vocab_size;
        let logits = self.logits(&fwd, layout.prompt_len - 1, target.len());
        let loss = mean_nll(&logits, target, v);
        Ok((loss, Tensor::matrix(target.len(), v, logits)?))
    }

    /// Gradient of `scale * loss` with respect to each soft segment, in
    /// prompt order.
    pub fn input_gradient(&self, prompt: &Prompt<T>, target: &[TokenId], scale: T) -> Result<(T, Vec<Tensor<T>>)> {
        if target.is_empty() {
            return Err(Error::Domain("target must be non-empty".into()));
        }
        let (x, layout) = self.embed(prompt, &target[..target.len() - 1])?;
        let fwd = self.forward(x);
        let w = self.width();
        let v = self.params.config.vocab_size;
        let seq = fwd.seq;
        let start = layout.prompt_len - 1;
        let t = target.len();
        let mut logits = self.logits(&fwd, start, t);
        let loss = mean_nll(&logits, target, v);

        // d loss / d logits = (softmax - onehot) / T
        let inv_t = scale / T::from_f64(t as f64);
        for (i, row) in logits.chunks_mut(v).enumerate() {
            softmax_in_place(row);
            row[target[i] as usize] -= T::one();
            row.iter_mut().for_each(|g| *g *= inv_t);
        }
        let mut d_final = vec![T::zero(); seq * w];
        let d_rows = matmul(&logits, self.params.token_embedding.data(), t, v, w);
        d_final[start * w..(start + t) * w].copy_from_slice(&d_rows);
        let mut dh = self.params.final_norm.backward(&fwd.final_norm, &d_final, None);

        for (layer, cache) in self.params.layers.iter().zip(&fwd.layers).rev() {
            // out = mid + ffn(norm(mid))
            let d_f_in = layer.ffn.backward(&cache.ffn, &cache.ffn_norm_out, &dh, seq, None);
            let mut d_mid = layer.ffn_norm.backward(&cache.ffn_norm, &d_f_in, None);
            add_into(&mut d_mid, &dh);
            // mid = input + attn(norm(input))
            let (mut d_a_in, d_kv) =
                layer
                    .attn
                    .backward(&cache.attn, &cache.attn_norm_out, &cache.attn_norm_out, &d_mid, None);
            add_into(&mut d_a_in, &d_kv);
            let mut d_in = layer.attn_norm.backward(&cache.attn_norm, &d_a_in, None);
            add_into(&mut d_in, &d_mid);
            debug_assert_eq!(cache.input.len(), d_in.len());
            dh = d_in;
        }

        let grads = layout
            .soft_rows
            .iter()
            .map(|&(s, n)| Tensor::matrix(n, w, dh[s * w..(s + n) * w].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((loss, grads))
    }

    /// Greedy decoding until end-of-sequence or `max_len` tokens. The end
    /// token is included when produced; argmax ties go to the lowest id.
    pub fn generate(&self, prompt: &Prompt<T>, max_len: usize) -> Result<Vec<TokenId>> {
        if max_len == 0 {
            return Err(Error::Domain("max_len must be at least 1".into()));
        }
        let v = self.params.config.vocab_size;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (x, _) = self.embed(prompt, &out)?;
            let fwd = self.forward(x);
            let logits = self.logits(&fwd, fwd.seq - 1, 1);
            let next = argmax(&logits[..v]) as TokenId;
            out.push(next);
            if next == PointTokenVocab::EOS {
                break;
            }
        }
        Ok(out)
    }
}

fn mean_nll<T: Scalar>(logits: &[T], target: &[TokenId], v: usize) -> T {
    let mut total = T::zero();
    for (row, &t) in logits.chunks(v).zip(target) {
        total += log_sum_exp(row) - row[t as usize];
    }
    total / T::from_f64(target.len() as f64)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
