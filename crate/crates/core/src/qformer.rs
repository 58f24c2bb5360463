//! Query transformer conditioned on point tokens.
//!
//! The input sequence is the `N` learnable queries followed by the embedded
//! point tokens. Every block runs bidirectional self-attention over the whole
//! sequence, cross-attention from every sequence row to the image patches,
//! and a feed-forward layer, each wrapped in residual + layer norm. A final
//! linear map projects every row to the language model width; the first `N`
//! rows are the soft prompt, the rest are returned but never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{PointTokenVocab, TokenId};
use crate::encoder::ImageFeatures;
use crate::error::{Error, Result};
use crate::nn::{
    add_into, add_vec, normal_tensor, Attention, AttentionCache, FeedForward, FeedForwardCache, LayerNorm,
    LayerNormCache, Linear, ParamSet,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub output_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_point_tokens: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            width: 32,
            feature_dim: 16,
            output_dim: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 64,
            max_point_tokens: 128,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.num_queries,
            self.width,
            self.feature_dim,
            self.output_dim,
            self.layers,
            self.heads,
            self.ffn_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("query transformer dimensions must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        PointTokenVocab::standard().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFormerLayer<T> {
    pub self_attn: Attention<T>,
    pub self_norm: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub cross_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
    pub ffn_norm: LayerNorm<T>,
}

impl<T: Scalar> ParamSet<T> for QFormerLayer<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.self_attn.tensors(&format!("{prefix}self_attn."), out);
        self.self_norm.tensors(&format!("{prefix}self_norm."), out);
        self.cross_attn.tensors(&format!("{prefix}cross_attn."), out);
        self.cross_norm.tensors(&format!("{prefix}cross_norm."), out);
        self.ffn.tensors(&format!("{prefix}ffn."), out);
        self.ffn_norm.tensors(&format!("{prefix}ffn_norm."), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.self_attn.tensors_mut(&format!("{prefix}self_attn."), out);
        self.self_norm.tensors_mut(&format!("{prefix}self_norm."), out);
        self.cross_attn.tensors_mut(&format!("{prefix}cross_attn."), out);
        self.cross_norm.tensors_mut(&format!("{prefix}cross_norm."), out);
        self.ffn.tensors_mut(&format!("{prefix}ffn."), out);
        self.ffn_norm.tensors_mut(&format!("{prefix}ffn_norm."), out);
    }
}

/// All trainable weights of the query transformer and its output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct QFormerParams<T> {
    pub config: QFormerConfig,
    pub queries: Tensor<T>,
    pub token_embedding: Tensor<T>,
    /// Learned positions for point tokens; queries carry no position.
    pub position_embedding: Tensor<T>,
    pub layers: Vec<QFormerLayer<T>>,
    pub projection: Linear<T>,
}

impl<T: Scalar> ParamSet<T> for QFormerParams<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}queries"), &self.queries));
        out.push((format!("{prefix}token_embedding"), &self.token_embedding));
        out.push((format!("{prefix}position_embedding"), &self.position_embedding));
        for (i, l) in self.layers.iter().enumerate() {
            l.tensors(&format!("{prefix}layers.{i}."), out);
        }
        self.projection.tensors(&format!("{prefix}projection."), out);
    }
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}queries"), &mut self.queries));
        out.push((format!("{prefix}token_embedding"), &mut self.token_embedding));
        out.push((format!("{prefix}position_embedding"), &mut self.position_embedding));
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.tensors_mut(&format!("{prefix}layers.{i}."), out);
        }
        self.projection.tensors_mut(&format!("{prefix}projection."), out);
    }
}

/// Attention weights recorded for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention<T> {
    /// `heads x seq x seq`
    pub self_attn: Vec<T>,
    /// `heads x seq x patches`
    pub cross_attn: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFormerOutput<T> {
    /// Soft prompt, `N x d`.
    pub z_hat: Tensor<T>,
    /// Projected point-token rows, `L x d`.
    pub w_hat: Tensor<T>,
    pub attention: Vec<LayerAttention<T>>,
    pub num_queries: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

/// Query-to-patch attention ready for display.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    /// `N x patches`
    pub weights: Tensor<T>,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

impl<T: Scalar> AttentionMap<T> {
    /// Attention per patch averaged over query rows.
    pub fn mean_over_queries(&self) -> Vec<T> {
        let n = self.weights.rows();
        let p = self.weights.cols();
        let mut out = vec![T::zero(); p];
        for q in 0..n {
            add_into(&mut out, self.weights.row(q));
        }
        let inv = T::one() / T::from_f64(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

impl<T: Scalar> QFormerOutput<T> {
    /// Query-to-patch cross-attention. `None` selectors average over all
    /// layers or heads.
    pub fn cross_attention_map(&self, layer: Option<usize>, head: Option<usize>) -> Result<AttentionMap<T>> {
        let layers = self.attention.len();
        if let Some(l) = layer {
            if l >= layers {
                return Err(Error::Selector(format!("layer {l} of {layers}")));
            }
        }
        if let Some(h) = head {
            if h >= self.heads {
                return Err(Error::Selector(format!("head {h} of {}", self.heads)));
            }
        }
        let n = self.num_queries;
        let s = self.seq_len;
        let p = self.patch_rows * self.patch_cols;
        let layer_ids: Vec<usize> = layer.map_or_else(|| (0..layers).collect(), |l| vec![l]);
        let head_ids: Vec<usize> = head.map_or_else(|| (0..self.heads).collect(), |h| vec![h]);
        let mut out = vec![T::zero(); n * p];
        for &l in &layer_ids {
            let probs = &self.attention[l].cross_attn;
            for &h in &head_ids {
                for q in 0..n {
                    let src = &probs[(h * s + q) * p..(h * s + q + 1) * p];
                    add_into(&mut out[q * p..(q + 1) * p], src);
                }
            }
        }
        let inv = T::one() / T::from_f64((layer_ids.len() * head_ids.len()) as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(AttentionMap {
            weights: Tensor::matrix(n, p, out)?,
            patch_rows: self.patch_rows,
            patch_cols: self.patch_cols,
        })
    }
}

struct LayerActivations<T> {
    input: Vec<T>,
    self_cache: AttentionCache<T>,
    self_norm: LayerNormCache<T>,
    after_self: Vec<T>,
    cross_cache: AttentionCache<T>,
    cross_norm: LayerNormCache<T>,
    after_cross: Vec<T>,
    ffn_cache: FeedForwardCache<T>,
    ffn_norm: LayerNormCache<T>,
}

/// Saved forward state; consumed by [`QFormerParams::backward`].
pub struct QFormerActivations<T> {
    tokens: Vec<TokenId>,
    features: Vec<T>,
    patches: usize,
    seq_len: usize,
    layers: Vec<LayerActivations<T>>,
    last: Vec<T>,
}

/// Parameter gradients plus the (unused by training) feature gradient.
pub struct QFormerGradients<T> {
    pub params: QFormerParams<T>,
    pub features: Tensor<T>,
}

impl<T: Scalar> QFormerParams<T> {
    pub fn new(config: QFormerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let queries = normal_tensor(&[c.num_queries, c.width], 1.0, &mut rng);
        let token_embedding = normal_tensor(&[c.vocab_size(), c.width], 1.0, &mut rng);
        let position_embedding = normal_tensor(&[c.max_point_tokens, c.width], 0.5, &mut rng);
        let layers = (0..c.layers)
            .map(|_| QFormerLayer {
                self_attn: Attention::new(c.width, c.width, c.heads, &mut rng),
                self_norm: LayerNorm::new(c.width),
                cross_attn: Attention::new(c.width, c.feature_dim, c.heads, &mut rng),
                cross_norm: LayerNorm::new(c.width),
                ffn: FeedForward::new(c.width, c.ffn_dim, &mut rng),
                ffn_norm: LayerNorm::new(c.width),
            })
            .collect();
        let projection = Linear::new(c.width, c.output_dim, &mut rng);
        Ok(Self {
            config,
            queries,
            token_embedding,
            position_embedding,
            layers,
            projection,
        })
    }

    pub fn cast<U: Scalar>(&self) -> QFormerParams<U> {
        let mut out = QFormerParams::<U>::new(self.config.clone(), 0).expect("validated config");
        self.cast_params(&mut out);
        out
    }

    fn check_inputs(&self, tokens: &[TokenId], features: &ImageFeatures<T>) -> Result<()> {
        let c = &self.config;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size()) {
            return Err(Error::UnknownToken(bad));
        }
        if tokens.len() > c.max_point_tokens {
            return Err(Error::Shape(format!(
                "{} point tokens exceed the limit of {}",
                tokens.len(),
                c.max_point_tokens
            )));
        }
        if features.dim() != c.feature_dim || features.grid.rows() != features.patches() {
            return Err(Error::Shape(format!(
                "features {:?} do not match feature_dim {} on a {}x{} grid",
                features.grid.shape(),
                c.feature_dim,
                features.rows,
                features.cols
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tokens: &[TokenId],
        features: &ImageFeatures<T>,
    ) -> Result<(QFormerOutput<T>, QFormerActivations<T>)> {
        self.check_inputs(tokens, features)?;
        let c = &self.config;
        let w = c.width;
        let n = c.num_queries;
        let seq = n + tokens.len();
        let patches = features.patches();
        let feats = features.grid.data();

        let mut h = Vec::with_capacity(seq * w);
        h.extend_from_slice(self.queries.data());
        for (i, &t) in tokens.iter().enumerate() {
            let e = self.token_embedding.row(t as usize);
            let p = self.position_embedding.row(i);
            h.extend(e.iter().zip(p).map(|(&a, &b)| a + b));
        }

        let mut acts = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (sa, self_cache) = layer.self_attn.forward(&h, seq, &h, seq, false);
            let (after_self, self_norm) = layer.self_norm.forward(&add_vec(&h, &sa), seq);
            let (ca, cross_cache) = layer.cross_attn.forward(&after_self, seq, feats, patches, false);
            let (after_cross, cross_norm) = layer.cross_norm.forward(&add_vec(&after_self, &ca), seq);
            let (ff, ffn_cache) = layer.ffn.forward(&after_cross, seq);
            let (out, ffn_norm) = layer.ffn_norm.forward(&add_vec(&after_cross, &ff), seq);
            attention.push(LayerAttention {
                self_attn: self_cache.probs.clone(),
                cross_attn: cross_cache.probs.clone(),
            });
            acts.push(LayerActivations {
                input: std::mem::replace(&mut h, out),
                self_cache,
                self_norm,
                after_self,
                cross_cache,
                cross_norm,
                after_cross,
                ffn_cache,
                ffn_norm,
            });
        }

        let projected = self.projection.forward(&h, seq);
        let d = c.output_dim;
        let z_hat = Tensor::matrix(n, d, projected[..n * d].to_vec())?;
        let w_hat = Tensor::matrix(tokens.len(), d, projected[n * d..].to_vec())?;
        let output = QFormerOutput {
            z_hat,
            w_hat,
            attention,
            num_queries: n,
            seq_len: seq,
            heads: c.heads,
            patch_rows: features.rows,
            patch_cols: features.cols,
        };
        let activations = QFormerActivations {
            tokens: tokens.to_vec(),
            features: feats.to_vec(),
            patches,
            seq_len: seq,
            layers: acts,
            last: h,
        };
        Ok((output, activations))
    }

    /// Backpropagates a gradient on the soft prompt rows. The projected point
    /// rows receive no gradient since they are discarded downstream.
    pub fn backward(&self, activations: QFormerActivations<T>, d_z_hat: &Tensor<T>) -> Result<QFormerGradients<T>> {
        let c = &self.config;
        let n = c.num_queries;
        let d = c.output_dim;
        let w = c.width;
        if d_z_hat.shape() != [n, d] {
            return Err(Error::Shape(format!(
                "soft prompt gradient {:?}, expected [{n}, {d}]",
                d_z_hat.shape()
            )));
        }
        let seq = activations.seq_len;
        let patches = activations.patches;
        let mut grads = self.zeros_like();
        let mut d_feats = vec![T::zero(); patches * c.feature_dim];

        let mut d_out = vec![T::zero(); seq * d];
        d_out[..n * d].copy_from_slice(d_z_hat.data());
        let mut dh = self
            .projection
            .backward(&activations.last, &d_out, seq, Some(&mut grads.projection));

        for (li, (layer, act)) in self.layers.iter().zip(&activations.layers).enumerate().rev() {
            let g = &mut grads.layers[li];
            // out = norm(after_cross + ffn(after_cross))
            let d_sum = layer.ffn_norm.backward(&act.ffn_norm, &dh, Some(&mut g.ffn_norm));
            let mut d_after_cross = layer
                .ffn
                .backward(&act.ffn_cache, &act.after_cross, &d_sum, seq, Some(&mut g.ffn));
            add_into(&mut d_after_cross, &d_sum);
            // after_cross = norm(after_self + cross(after_self, feats))
            let d_sum = layer
                .cross_norm
                .backward(&act.cross_norm, &d_after_cross, Some(&mut g.cross_norm));
            let (mut d_after_self, d_f) = layer.cross_attn.backward(
                &act.cross_cache,
                &act.after_self,
                &activations.features,
                &d_sum,
                Some(&mut g.cross_attn),
            );
            add_into(&mut d_after_self, &d_sum);
            add_into(&mut d_feats, &d_f);
            // after_self = norm(input + self(input))
            let d_sum = layer
                .self_norm
                .backward(&act.self_norm, &d_after_self, Some(&mut g.self_norm));
            let (mut d_in, d_kv) =
                layer
                    .self_attn
                    .backward(&act.self_cache, &act.input, &act.input, &d_sum, Some(&mut g.self_attn));
            add_into(&mut d_in, &d_kv);
            add_into(&mut d_in, &d_sum);
            dh = d_in;
        }

        grads.queries.data_mut().copy_from_slice(&dh[..n * w]);
        for (i, &t) in activations.tokens.iter().enumerate() {
            let row = &dh[(n + i) * w..(n + i + 1) * w];
            add_into(grads.token_embedding.row_mut(t as usize), row);
            add_into(grads.position_embedding.row_mut(i), row);
        }
        Ok(QFormerGradients {
            params: grads,
            features: Tensor::matrix(patches, c.feature_dim, d_feats)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> QFormerConfig {
        QFormerConfig {
            num_queries: 2,
            width: 6,
            feature_dim: 5,
            output_dim: 6,
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            max_point_tokens: 8,
        }
    }

    fn features(rows: usize, cols: usize, dim: usize, seed: u64) -> ImageFeatures<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageFeatures {
            grid: normal_tensor(&[rows * cols, dim], 1.0, &mut rng),
            rows,
            cols,
        }
    }

    #[test]
    fn empty_scribble_shapes() {
        let p = QFormerParams::<f64>::new(tiny(), 1).unwrap();
        let (out, _) = p.forward(&[], &features(2, 2, 5, 0)).unwrap();
        assert_eq!(out.z_hat.shape(), &[2, 6]);
        assert_eq!(out.w_hat.shape(), &[0, 6]);
    }

    #[test]
    fn sequence_length_is_queries_plus_tokens() {
        let cfg = QFormerConfig {
            num_queries: 4,
            ..tiny()
        };
        let p = QFormerParams::<f64>::new(cfg, 1).unwrap();
        let toks = [4, 40, 50, 5, 4, 41, 51, 5];
        let (out, _) = p.forward(&toks, &features(2, 3, 5, 0)).unwrap();
        assert_eq!(out.seq_len, 12);
        assert_eq!(out.w_hat.shape(), &[8, 6]);
    }

    #[test]
    fn unknown_token_rejected() {
        let p = QFormerParams::<f64>::new(tiny(), 1).unwrap();
        assert!(matches!(
            p.forward(&[500], &features(2, 2, 5, 0)),
            Err(Error::UnknownToken(500))
        ));
    }

    #[test]
    fn attention_rows_are_normalized() {
        let p = QFormerParams::<f64>::new(QFormerConfig { layers: 2, ..tiny() }, 3).unwrap();
        let (out, _) = p.forward(&[4, 10, 20, 5], &features(3, 3, 5, 2)).unwrap();
        for la in &out.attention {
            for row in la.cross_attn.chunks(9) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            for row in la.self_attn.chunks(out.seq_len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let m = out.cross_attention_map(None, None).unwrap();
        for q in 0..2 {
            assert!((m.weights.row(q).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(out.cross_attention_map(Some(2), None).is_err());
        assert!(out.cross_attention_map(None, Some(2)).is_err());
    }

    #[test]
    fn single_patch_gets_all_mass() {
        let p = QFormerParams::<f64>::new(tiny(), 3).unwrap();
        let (out, _) = p.forward(&[4, 10, 20, 5], &features(1, 1, 5, 2)).unwrap();
        let m = out.cross_attention_map(Some(0), Some(1)).unwrap();
        assert_eq!(m.weights.data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let p = QFormerParams::<f64>::new(tiny(), 5).unwrap();
        let (_, acts) = p.forward(&[4, 10, 20, 5], &features(2, 2, 5, 1)).unwrap();
        let g = p.backward(acts, &Tensor::zeros(&[2, 6])).unwrap();
        assert_eq!(g.params.sum_squares(), 0.0);
        assert_eq!(g.features.sum_squares(), 0.0);
    }

    #[test]
    fn backward_rejects_wrong_shape() {
        let p = QFormerParams::<f64>::new(tiny(), 5).unwrap();
        let (_, acts) = p.forward(&[], &features(2, 2, 5, 1)).unwrap();
        assert!(matches!(
            p.backward(acts, &Tensor::zeros(&[3, 6])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn point_tokens_change_the_soft_prompt() {
        let p = QFormerParams::<f64>::new(tiny(), 5).unwrap();
        let f = features(2, 2, 5, 1);
        let (a, _) = p.forward(&[4, 10, 20, 5], &f).unwrap();
        let (b, _) = p.forward(&[4, 90, 70, 5], &f).unwrap();
        let diff: f64 = a
            .z_hat
            .data()
            .iter()
            .zip(b.z_hat.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn cast_round_trip_preserves_f32_values() {
        let p = QFormerParams::<f32>::new(QFormerConfig::default(), 9).unwrap();
        let back: QFormerParams<f32> = p.cast::<f64>().cast();
        assert_eq!(p, back);
    }
}
