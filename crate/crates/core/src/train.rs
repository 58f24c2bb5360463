//! Training loop for the query transformer against the frozen language
//! model.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::batch::scribble_tokens;
use crate::data::{
    caption_target, make_synthetic_dataset, MixedBatchSampler, Origin, SyntheticConfig, SyntheticDataset, TrainingItem,
    Vocabulary,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lm::{LmConfig, Prompt};
use crate::model::{FeatureCache, ModelBundle, QFORMER_FILE};
use crate::nn::ParamSet;
use crate::qformer::{QFormerConfig, QFormerParams};
use crate::rng::{derive_seed, rng_for};

pub const REPORT_FILE: &str = "report.jsonl";
pub const BEST_FILE: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

/// Flat training configuration. Every key is optional in the TOML file;
/// missing keys take the desk-scale defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Stops early after this many optimizer steps when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Points sampled per scribble.
    pub k: usize,
    /// Learned queries.
    pub n: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub feature_dim: usize,
    pub lm_width: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_ffn_dim: usize,
    pub lm_context: usize,
    pub encoder_seed: u64,
    pub grid: usize,
    pub images: usize,
    pub eval_images: usize,
    pub data_seed: u64,
    pub max_words: usize,
    /// Evaluate (and maybe save the best checkpoint) every this many steps;
    /// 0 means only at epoch ends.
    pub eval_every: usize,
    pub save_epochs: bool,
    /// Ablation: regional items lose their point tokens.
    pub drop_point_tokens: bool,
    /// Comparison run: no global pairs in the batches.
    pub regional_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs: 6,
            max_steps: None,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            k: 10,
            n: 8,
            width: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 64,
            feature_dim: 16,
            lm_width: 32,
            lm_layers: 2,
            lm_heads: 2,
            lm_ffn_dim: 64,
            lm_context: 128,
            encoder_seed: 11,
            grid: 6,
            images: 2000,
            eval_images: 200,
            data_seed: 7,
            max_words: 256,
            eval_every: 0,
            save_epochs: true,
            drop_point_tokens: false,
            regional_only: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size must be even and positive, got {}",
                self.batch_size
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.images == 0 {
            return Err(Error::Config("images must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.qformer_config().validate()?;
        Ok(())
    }

    pub fn qformer_config(&self) -> QFormerConfig {
        QFormerConfig {
            num_queries: self.n,
            width: self.width,
            feature_dim: self.feature_dim,
            output_dim: self.lm_width,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_point_tokens: 4 * self.k.max(32),
        }
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            width: self.lm_width,
            layers: self.lm_layers,
            heads: self.lm_heads,
            ffn_dim: self.lm_ffn_dim,
            context: self.lm_context,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            grid: self.grid,
            images: self.images,
            seed: self.data_seed,
            ..SyntheticConfig::default()
        }
    }

    /// Held-out images drawn from a separate seed stream.
    pub fn eval_synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            images: self.eval_images,
            seed: derive_seed(self.data_seed, "held-out"),
            ..self.synthetic_config()
        }
    }

    pub fn encoder_config(&self, data: &SyntheticConfig) -> EncoderConfig {
        EncoderConfig {
            grid: data.grid,
            colors: data.colors.clone(),
            shapes: data.shapes.clone(),
            feature_dim: self.feature_dim,
            seed: self.encoder_seed,
        }
    }
}

/// Adam with optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<P> {
    m: P,
    v: P,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
}

impl<P: ParamSet<f32>> Adam<P> {
    pub fn new(params: &P, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.epsilon as f32;
        let decay = (self.lr * self.weight_decay) as f32;
        let g = grads.named();
        let mut m = self.m.named_mut();
        let mut v = self.v.named_mut();
        for (i, (_, p)) in params.named_mut().into_iter().enumerate() {
            let (g, m, v) = (g[i].1.data(), m[i].1.data_mut(), v[i].1.data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                if decay != 0.0 {
                    *w -= decay * *w;
                }
                *w -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_regional: f64,
    pub loss_global: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub eval_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_eval_loss: Option<f64>,
    /// Wall time is reported here only; the files stay time-free so reruns
    /// compare byte for byte.
    pub wall_time_secs: f64,
    pub final_checkpoint: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub model: ModelBundle,
    pub report: TrainReport,
    pub train_data: SyntheticDataset,
    pub eval_data: SyntheticDataset,
}

/// Held-out items with point tokens fixed once, so evaluations at
/// different steps see identical inputs.
pub fn fixed_eval_items(
    data: &SyntheticDataset,
    vocab: &Vocabulary,
    k: usize,
    seed: u64,
    drop_points: bool,
) -> Result<Vec<TrainingItem>> {
    let mut rng = rng_for(seed, "eval-items");
    let mut items = Vec::with_capacity(data.regional.len() + data.global.len());
    for pair in &data.regional {
        let tokens = scribble_tokens(&pair.scribble, k, &mut rng)?;
        items.push(TrainingItem {
            image_id: pair.image_id.clone(),
            point_tokens: if drop_points { Vec::new() } else { tokens },
            target_tokens: caption_target(vocab, &pair.text),
            origin: Origin::Regional,
        });
    }
    for pair in &data.global {
        items.push(TrainingItem {
            image_id: pair.image_id.clone(),
            point_tokens: Vec::new(),
            target_tokens: caption_target(vocab, &pair.text),
            origin: Origin::Global,
        });
    }
    Ok(items)
}

/// Mean language-model loss over `items`.
pub fn eval_loss(model: &ModelBundle, features: &FeatureCache, items: &[TrainingItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty dataset".into()));
    }
    let mut total = 0.0;
    for it in items {
        total += model.region_loss(features.get(&it.image_id)?, &it.point_tokens, &it.target_tokens)? as f64;
    }
    Ok(total / items.len() as f64)
}

/// Loss and accumulated (unscaled-by-batch) parameter gradient for one item.
fn item_gradient(
    model: &ModelBundle,
    features: &FeatureCache,
    item: &TrainingItem,
    scale: f32,
    grads: &mut QFormerParams<f32>,
) -> Result<f32> {
    let feats = features.get(&item.image_id)?;
    let (out, acts) = model.qformer.forward(&item.point_tokens, feats)?;
    let (loss, dz) = model
        .lm
        .input_gradient(&Prompt::soft(out.z_hat), &item.target_tokens, scale)?;
    let g = model.qformer.backward(acts, &dz[0])?;
    grads.accumulate(&g.params);
    Ok(loss)
}

fn grad_norm(grads: &QFormerParams<f32>) -> f64 {
    grads.sum_squares().sqrt()
}

struct RunFiles {
    dir: PathBuf,
    report: fs::File,
}

impl RunFiles {
    fn create(dir: &Path, cfg: &TrainConfig, model: &ModelBundle) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        model.save_lm(&dir.join(crate::model::LM_FILE))?;
        let report_path = dir.join(REPORT_FILE);
        let report = fs::File::create(&report_path).map_err(|e| Error::io(&report_path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            report,
        })
    }

    fn log_step(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.report, "{line}").map_err(|e| Error::io(self.dir.join(REPORT_FILE), e))
    }
}

/// Builds the data and initial model a run starts from.
pub fn prepare(cfg: &TrainConfig) -> Result<(ModelBundle, SyntheticDataset, SyntheticDataset)> {
    cfg.validate()?;
    let train_data = make_synthetic_dataset(&cfg.synthetic_config())?;
    let eval_data = if cfg.eval_images > 0 {
        make_synthetic_dataset(&cfg.eval_synthetic_config())?
    } else {
        SyntheticDataset {
            config: cfg.eval_synthetic_config(),
            images: Vec::new(),
            regional: Vec::new(),
            global: Vec::new(),
        }
    };
    let vocab = Vocabulary::build(train_data.texts(), cfg.max_words)?;
    let lm = cfg.lm_config(vocab.len());
    let model = ModelBundle::new(
        vocab,
        cfg.encoder_config(&train_data.config),
        cfg.qformer_config(),
        lm,
        cfg.k,
        cfg.seed,
    )?;
    Ok((model, train_data, eval_data))
}

/// Trains from scratch. With `out_dir`, writes the run directory: config,
/// frozen LM, per-step report, per-epoch and best checkpoints, and the final
/// query-transformer checkpoint.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let started = Instant::now();
    let (mut model, train_data, eval_data) = prepare(cfg)?;
    let features = FeatureCache::build(&model.encoder, train_data.images.iter().chain(&eval_data.images))?;
    let eval_items = fixed_eval_items(&eval_data, &model.vocab, cfg.k, cfg.seed, cfg.drop_point_tokens)?;
    let mut files = out_dir.map(|d| RunFiles::create(d, cfg, &model)).transpose()?;

    let vocab = model.vocab.clone();
    let mut sampler = MixedBatchSampler::new(
        &train_data.regional,
        &train_data.global,
        &vocab,
        cfg.batch_size,
        cfg.k,
        derive_seed(cfg.seed, "batches"),
    )?
    .drop_point_tokens(cfg.drop_point_tokens)
    .regional_only(cfg.regional_only);

    let steps_per_epoch = sampler.steps_per_epoch();
    let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * steps_per_epoch);
    let mut adam = Adam::new(&model.qformer, cfg);
    let mut report = TrainReport {
        steps: Vec::with_capacity(total_steps),
        evals: Vec::new(),
        best_eval_loss: None,
        wall_time_secs: 0.0,
        final_checkpoint: None,
    };
    let scale = 1.0 / cfg.batch_size as f32;

    for step in 1..=total_steps {
        let batch = sampler.next_batch()?;
        let mut grads = model.qformer.zeros_like();
        let (mut sum_r, mut n_r, mut sum_g, mut n_g) = (0.0f64, 0usize, 0.0f64, 0usize);
        for item in &batch.items {
            let loss = item_gradient(&model, &features, item, scale, &mut grads)? as f64;
            match item.origin {
                Origin::Regional => {
                    sum_r += loss;
                    n_r += 1;
                }
                Origin::Global => {
                    sum_g += loss;
                    n_g += 1;
                }
            }
        }
        let loss = (sum_r + sum_g) / batch.items.len() as f64;
        let norm = grad_norm(&grads);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("loss {loss}, gradient norm {norm}"),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                grads.scale_all((clip / norm) as f32);
            }
        }
        adam.step(&mut model.qformer, &grads);

        let rec = StepRecord {
            step,
            loss,
            loss_regional: if n_r > 0 { sum_r / n_r as f64 } else { 0.0 },
            loss_global: if n_g > 0 { sum_g / n_g as f64 } else { 0.0 },
            grad_norm: norm,
        };
        if let Some(f) = files.as_mut() {
            f.log_step(&rec)?;
        }
        report.steps.push(rec);

        let epoch_end = step % steps_per_epoch == 0;
        if epoch_end {
            log::info!("epoch {} done at step {step}, loss {loss:.4}", step / steps_per_epoch);
            if let (Some(f), true) = (files.as_ref(), cfg.save_epochs) {
                model.save_qformer(&f.dir.join(format!("epoch-{:03}.ckpt", step / steps_per_epoch)))?;
            }
        }
        let periodic = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if (epoch_end || periodic || step == total_steps) && !eval_items.is_empty() {
            let el = eval_loss(&model, &features, &eval_items)?;
            log::info!("step {step}: eval loss {el:.4}");
            report.evals.push(EvalRecord { step, eval_loss: el });
            if report.best_eval_loss.is_none_or(|b| el < b) {
                report.best_eval_loss = Some(el);
                if let Some(f) = files.as_ref() {
                    model.save_qformer(&f.dir.join(BEST_FILE))?;
                }
            }
        }
    }

    if let Some(f) = files.as_ref() {
        let path = f.dir.join(QFORMER_FILE);
        model.save_qformer(&path)?;
        report.final_checkpoint = Some(path);
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        report,
        train_data,
        eval_data,
    })
}

/// Reads a `report.jsonl` file back.
pub fn read_report(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Parameter names whose values differ between two parameter sets.
pub fn changed_tensors<P: ParamSet<f32>>(before: &P, after: &P) -> Vec<String> {
    before
        .named()
        .into_iter()
        .zip(after.named())
        .filter(|((_, a), (_, b))| a != b)
        .map(|((n, _), _)| n)
        .collect()
}

/// Frozen-encoder fingerprint: SHA-256 of the projection values.
pub fn encoder_checksum(model: &ModelBundle) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in model.encoder.projection().data() {
        h.update(v.to_le_bytes());
    }
    crate::rng::hex(&h.finalize())
}
