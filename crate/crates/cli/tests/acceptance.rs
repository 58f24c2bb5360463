//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Tolerances are the constants below.
//!
//! Two desk-scale trainings (full and no-points ablation) run here, so a
//! full pass takes several minutes on one core.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use pointprompt::codec::{
    decode_point_string, encode_points, sample_points_in_mask, tokenize_points, Point2D, PointTokenVocab,
    QuantizedPoint, TokenId,
};
use pointprompt::data::{
    caption_target, make_synthetic_dataset, MixedBatchSampler, Origin, SyntheticDataset, Vocabulary,
};
use pointprompt::encoder::ImageFeatures;
use pointprompt::lm::{FrozenLm, LmConfig, LmParams, Prompt};
use pointprompt::mask::Mask;
use pointprompt::model::{FeatureCache, ModelBundle};
use pointprompt::nn::ParamSet;
use pointprompt::qformer::{QFormerConfig, QFormerParams};
use pointprompt::rng::derive_seed;
use pointprompt::tasks::synthetic::{synthetic_ris, synthetic_vcr, synthetic_vqa};
use pointprompt::tasks::vqa::question_text;
use pointprompt::tasks::{
    argmin_lowest, assemble_ris, compute_miou, evaluate_captions, instance_rng, ris_score, ris_select,
    robustness_report, vcr_answer, vcr_prompt, vqa_answer, ImageStore, RisInstance,
};
use pointprompt::tensor::Tensor;
use pointprompt::train::{encoder_checksum, prepare, train, TrainConfig, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CODEC_SETS: usize = 1000;
const CODEC_BUDGET: Duration = Duration::from_secs(1);
const FD_STEP: f64 = 1e-5;
const FD_MAX_REL: f64 = 1e-3;
/// Denominator floor for relative error, so near-zero gradients compare on
/// an absolute scale.
const FD_REL_FLOOR: f64 = 1e-4;
const FD_CONFIGS: usize = 6;
const FD_BUDGET: Duration = Duration::from_secs(60);
const FROZEN_STEPS: usize = 200;
const MIXED_BATCHES: usize = 100;
const MIN_TOKEN_ACCURACY: f64 = 0.90;
const MAX_ABLATION_ACCURACY: f64 = 0.45;
const MIN_ATTENTION_RATIO: f64 = 2.0;
const RIS_BRUTE_INSTANCES: usize = 100;
const MIN_RIS_ACCURACY: f64 = 0.85;
const ROBUSTNESS_RADII: [usize; 4] = [0, 3, 7, 15];
const ROBUSTNESS_RUNS: u64 = 10;
const MIN_ROBUSTNESS_TREND: f64 = 0.80;
const ROBUSTNESS_IMAGES: usize = 60;
const VCR_VQA_RECORDS: usize = 60;
const EVAL_SEED: u64 = 7;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
}

fn codec_exactness() -> Outcome {
    let start = Instant::now();
    let vocab = PointTokenVocab::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..CODEC_SETS {
        let n = rng.random_range(0..32);
        let pts: Vec<Point2D> = (0..n)
            .map(|_| Point2D::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)).unwrap())
            .collect();
        let s = encode_points(&pts).map_err(e2s)?;
        // Quantization oracle computed here, not by the codec.
        let want: Vec<QuantizedPoint> = pts
            .iter()
            .map(|p| QuantizedPoint::new((p.x * 100.0).round() as u8, (p.y * 100.0).round() as u8).unwrap())
            .collect();
        ensure(decode_point_string(&s).map_err(e2s)? == want, || {
            format!("set {i}: {s:?}")
        })?;
        ensure(tokenize_points(&s, &vocab).map_err(e2s)?.len() == 4 * n, || {
            format!("set {i}: token count")
        })?;
    }
    let example = [Point2D::new(0.324, 0.643).unwrap(), Point2D::new(0.369, 0.622).unwrap()];
    let s = encode_points(&example).map_err(e2s)?;
    ensure(s == "[32 64] [37 62]", || format!("worked example gave {s:?}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < CODEC_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{CODEC_SETS} sets exact, worked example byte-exact, {:.0} ms",
        elapsed.as_secs_f64() * 1e3
    ))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_REL_FLOOR)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// One random tiny configuration: every Q-Former parameter and feature
/// through the frozen LM, then LM input gradients for a prompt with text
/// between two soft segments. Returns (max relative error, values checked).
fn gradient_case(seed: u64) -> Result<(f64, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::build(["red blue circle square left"], 16).map_err(e2s)?;
    let lm_heads = rng.random_range(1..=2);
    let lm_cfg = LmConfig {
        vocab_size: vocab.len(),
        width: lm_heads * rng.random_range(1..=3),
        layers: rng.random_range(1..=2),
        heads: lm_heads,
        ffn_dim: rng.random_range(2..=6),
        context: 40,
    };
    let heads = rng.random_range(1..=2);
    let qf_cfg = QFormerConfig {
        num_queries: rng.random_range(1..=3),
        width: heads * rng.random_range(1..=3),
        feature_dim: rng.random_range(1..=3),
        output_dim: lm_cfg.width,
        layers: rng.random_range(1..=2),
        heads,
        ffn_dim: rng.random_range(2..=5),
        max_point_tokens: 16,
    };
    let npts = rng.random_range(0..=2);
    let pts: Vec<Point2D> = (0..npts)
        .map(|_| Point2D::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)).unwrap())
        .collect();
    let tokens = tokenize_points(&encode_points(&pts).unwrap(), &PointTokenVocab::standard()).unwrap();
    let (rows, cols) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let feats = ImageFeatures {
        grid: random_matrix(rows * cols, qf_cfg.feature_dim, &mut rng),
        rows,
        cols,
    };
    let target = caption_target(&vocab, "blue square");
    let qf = QFormerParams::<f64>::new(qf_cfg, seed + 100).map_err(e2s)?;
    let lm = FrozenLm::seal(LmParams::<f64>::new(lm_cfg, seed + 200).map_err(e2s)?);

    let loss = |qf: &QFormerParams<f64>, feats: &ImageFeatures<f64>| {
        let (out, _) = qf.forward(&tokens, feats).unwrap();
        lm.loss(&Prompt::soft(out.z_hat), &target).unwrap().0
    };
    let (out, acts) = qf.forward(&tokens, &feats).map_err(e2s)?;
    let (_, dz) = lm.input_gradient(&Prompt::soft(out.z_hat), &target, 1.0).map_err(e2s)?;
    let grads = qf.backward(acts, &dz[0]).map_err(e2s)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let analytic = grads.params.named();
    for (ti, (_, g)) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let (mut p, mut m) = (qf.clone(), qf.clone());
            p.named_mut()[ti].1.data_mut()[i] += FD_STEP;
            m.named_mut()[ti].1.data_mut()[i] -= FD_STEP;
            let numeric = (loss(&p, &feats) - loss(&m, &feats)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], numeric));
            checked += 1;
        }
    }
    for i in 0..feats.grid.len() {
        let (mut p, mut m) = (feats.clone(), feats.clone());
        p.grid.data_mut()[i] += FD_STEP;
        m.grid.data_mut()[i] -= FD_STEP;
        let numeric = (loss(&qf, &p) - loss(&qf, &m)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads.features.data()[i], numeric));
        checked += 1;
    }

    let a = random_matrix(2, lm.config().width, &mut rng);
    let b = random_matrix(1, lm.config().width, &mut rng);
    let build = |a: &Tensor<f64>, b: &Tensor<f64>| {
        Prompt::new()
            .with_text(&vocab, "[0]:")
            .with_soft(a.clone())
            .with_text(&vocab, "left")
            .with_soft(b.clone())
            .with_text(&vocab, "red ?")
    };
    let (_, seg_grads) = lm.input_gradient(&build(&a, &b), &target, 1.0).map_err(e2s)?;
    for (seg, base) in [&a, &b].into_iter().enumerate() {
        for i in 0..base.len() {
            let (mut p, mut m) = (base.clone(), base.clone());
            p.data_mut()[i] += FD_STEP;
            m.data_mut()[i] -= FD_STEP;
            let (pp, mp) = if seg == 0 {
                (build(&p, &b), build(&m, &b))
            } else {
                (build(&a, &p), build(&a, &m))
            };
            let numeric = (lm.loss(&pp, &target).unwrap().0 - lm.loss(&mp, &target).unwrap().0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(seg_grads[seg].data()[i], numeric));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..FD_CONFIGS as u64 {
        let (w, c) = gradient_case(seed)?;
        worst = worst.max(w);
        checked += c;
    }
    let elapsed = start.elapsed();
    ensure(worst <= FD_MAX_REL, || format!("max relative error {worst:.2e}"))?;
    ensure(elapsed < FD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{FD_CONFIGS} configs, {checked} values, max relative error {worst:.2e}"
    ))
}

fn frozen_contract() -> Outcome {
    let cfg = TrainConfig {
        images: 300,
        eval_images: 20,
        max_steps: Some(FROZEN_STEPS),
        ..TrainConfig::default()
    };
    let (initial, _, _) = prepare(&cfg).map_err(e2s)?;
    let lm_before = pointprompt::checkpoint::param_checksum(initial.lm.params());
    let enc_before = encoder_checksum(&initial);
    let out = train(&cfg, None).map_err(e2s)?;
    ensure(out.report.steps.len() == FROZEN_STEPS, || "wrong step count".into())?;
    let lm_after = pointprompt::checkpoint::param_checksum(out.model.lm.params());
    let enc_after = encoder_checksum(&out.model);
    ensure(lm_after == lm_before, || {
        format!("LM checksum {lm_before} -> {lm_after}")
    })?;
    ensure(enc_after == enc_before, || {
        format!("encoder checksum {enc_before} -> {enc_after}")
    })?;
    ensure(out.model.qformer != initial.qformer, || {
        "query transformer did not change".into()
    })?;
    Ok(format!(
        "{FROZEN_STEPS} steps, LM {}, encoder {}",
        &lm_after[..12],
        &enc_after[..12]
    ))
}

fn mixed_batch_contract() -> Outcome {
    let mut total = 0;
    for (seed, batch) in [(1u64, 16usize), (2, 4), (3, 10)] {
        let cfg = TrainConfig {
            images: 40,
            data_seed: seed,
            ..TrainConfig::default()
        };
        let ds = make_synthetic_dataset(&cfg.synthetic_config()).map_err(e2s)?;
        let vocab = Vocabulary::build(ds.texts(), 64).map_err(e2s)?;
        let mut sampler = MixedBatchSampler::new(&ds.regional, &ds.global, &vocab, batch, 10, seed).map_err(e2s)?;
        for b in 0..MIXED_BATCHES {
            let batch_items = sampler.next_batch().map_err(e2s)?;
            ensure(batch_items.items.len() == batch, || {
                format!("batch {b} has {} items", batch_items.items.len())
            })?;
            let regional = batch_items
                .items
                .iter()
                .filter(|i| i.origin == Origin::Regional)
                .count();
            ensure(2 * regional == batch, || {
                format!("batch {b}: {regional} regional of {batch}")
            })?;
            for it in batch_items.items.iter().filter(|i| i.origin == Origin::Global) {
                ensure(it.point_tokens.is_empty(), || {
                    format!("batch {b}: global item with points")
                })?;
            }
            total += 1;
        }
    }
    Ok(format!("{total} batches half regional, global items pointless"))
}

fn held_out_accuracy(out: &TrainOutcome, drop_points: bool) -> Result<f64, String> {
    let store = ImageStore::from_dataset(&out.eval_data);
    let report = evaluate_captions(&out.model, &store, &out.eval_data.regional, EVAL_SEED, drop_points).map_err(e2s)?;
    Ok(report.token_accuracy)
}

fn region_conditioning(full: &TrainOutcome, ablation: &TrainOutcome) -> Outcome {
    let acc = held_out_accuracy(full, false)?;
    let abl = held_out_accuracy(ablation, true)?;
    let detail = format!(
        "token accuracy {acc:.4} (need >= {MIN_TOKEN_ACCURACY}), ablation {abl:.4} (need <= {MAX_ABLATION_ACCURACY}), {} held-out pairs, {} steps",
        full.eval_data.regional.len(),
        full.report.steps.len()
    );
    ensure(acc >= MIN_TOKEN_ACCURACY && abl <= MAX_ABLATION_ACCURACY, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn attention_grounding(full: &TrainOutcome) -> Outcome {
    let model = &full.model;
    let data = &full.eval_data;
    let feats = FeatureCache::build(&model.encoder, &data.images).map_err(e2s)?;
    let mut ratios = Vec::new();
    for (i, pair) in data.regional.iter().enumerate() {
        let img = data.image(&pair.image_id).ok_or("missing image")?;
        let obj = img
            .objects
            .iter()
            .find(|o| o.caption() == pair.text)
            .ok_or_else(|| format!("no object for {:?}", pair.text))?;
        let mask = obj.mask(img.grid);
        let mut rng = instance_rng(EVAL_SEED, &format!("attention/{i}"));
        let tokens = model.point_tokens(&pair.scribble, &mut rng).map_err(e2s)?;
        let out = model
            .region(feats.get(&pair.image_id).map_err(e2s)?, &tokens)
            .map_err(e2s)?;
        let map = out.cross_attention_map(None, None).map_err(e2s)?;
        ensure(map.patch_rows * map.patch_cols == mask.cells().len(), || {
            "patch grid differs from image grid".into()
        })?;
        let mean = map.mean_over_queries();
        let mass: f64 = mask.set_indices().iter().map(|&c| mean[c] as f64).sum();
        let area = mask.count() as f64 / mask.cells().len() as f64;
        ratios.push(mass / area);
    }
    let avg = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let above = ratios.iter().filter(|&&r| r >= MIN_ATTENTION_RATIO).count();
    let detail = format!(
        "mass/area {avg:.3} (need >= {MIN_ATTENTION_RATIO}), {above}/{} instances individually above",
        ratios.len()
    );
    ensure(avg >= MIN_ATTENTION_RATIO, || detail.clone())?;
    Ok(detail)
}

fn random_ris_instance(rng: &mut ChaCha8Rng, data: &SyntheticDataset, i: usize) -> RisInstance {
    let img = &data.images[rng.random_range(0..data.images.len())];
    let n = rng.random_range(1..6);
    let cells = img.grid * img.grid;
    let mut proposals: Vec<Mask> = (0..n)
        .map(|_| {
            let mut c = vec![false; cells];
            for _ in 0..rng.random_range(0..6) {
                c[rng.random_range(0..cells)] = true;
            }
            Mask::from_cells(img.grid, img.grid, c).unwrap()
        })
        .collect();
    proposals.push(img.objects[0].mask(img.grid));
    if rng.random_bool(0.3) {
        proposals.push(proposals[0].clone());
    }
    RisInstance {
        id: format!("brute-{i}"),
        image_id: img.image_id.clone(),
        proposals,
        description: img.objects[rng.random_range(0..img.objects.len())].caption(),
        ground_truth: None,
    }
}

fn ris_selection(full: &TrainOutcome) -> Outcome {
    // Exact mIoU cases.
    let a = Mask::from_cells(1, 3, vec![true, true, false]).unwrap();
    let b = Mask::from_cells(1, 3, vec![false, true, true]).unwrap();
    let c = Mask::from_cells(1, 3, vec![false, false, true]).unwrap();
    let d = Mask::from_cells(1, 3, vec![true, false, false]).unwrap();
    ensure(
        compute_miou(std::slice::from_ref(&a), std::slice::from_ref(&a)).map_err(e2s)? == 1.0,
        || "identity mIoU".into(),
    )?;
    ensure(compute_miou(&[c], &[d]).map_err(e2s)? == 0.0, || "disjoint mIoU".into())?;
    ensure(compute_miou(&[a], &[b]).map_err(e2s)? == 1.0 / 3.0, || {
        "hand-case mIoU".into()
    })?;

    let model = &full.model;
    let data = &full.eval_data;
    let store = ImageStore::from_dataset(data);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..RIS_BRUTE_INSTANCES {
        let inst = random_ris_instance(&mut rng, data, i);
        let image = store.get(&inst.image_id).map_err(e2s)?;
        let sel = ris_select(model, image, &inst, EVAL_SEED).map_err(e2s)?;
        let feats = model.features(image).map_err(e2s)?;
        let mut best: Option<(usize, f64)> = None;
        for (j, m) in inst.proposals.iter().enumerate() {
            let s = ris_score(model, &feats, m, &inst.description, EVAL_SEED, &inst.id).map_err(e2s)?;
            if s.is_finite() && best.is_none_or(|(_, b)| s < b) {
                best = Some((j, s));
            }
        }
        ensure(best.map(|b| b.0) == Some(sel.index), || {
            format!("instance {i}: {} vs {best:?}", sel.index)
        })?;
    }

    let (records, proposals) = synthetic_ris(data, EVAL_SEED);
    let instances = assemble_ris(&records, &proposals).map_err(e2s)?;
    let mut correct = 0;
    for inst in &instances {
        let sel = ris_select(model, store.get(&inst.image_id).map_err(e2s)?, inst, EVAL_SEED).map_err(e2s)?;
        if Some(&inst.proposals[sel.index]) == inst.ground_truth.as_ref() {
            correct += 1;
        }
    }
    let acc = correct as f64 / instances.len() as f64;
    let detail = format!(
        "brute force agrees on {RIS_BRUTE_INSTANCES}, synthetic accuracy {acc:.4} ({correct}/{}, need >= {MIN_RIS_ACCURACY}), mIoU cases exact",
        instances.len()
    );
    ensure(acc >= MIN_RIS_ACCURACY, || detail.clone())?;
    Ok(detail)
}

fn robustness_protocol(full: &TrainOutcome) -> Outcome {
    let model = &full.model;
    let base = TrainConfig::default();
    let mut held = 0;
    let mut summary = Vec::new();
    for run in 0..ROBUSTNESS_RUNS {
        let mut syn = base.eval_synthetic_config();
        syn.seed = derive_seed(syn.seed, &format!("robustness/{run}"));
        syn.images = ROBUSTNESS_IMAGES;
        let data = make_synthetic_dataset(&syn).map_err(e2s)?;
        let store = ImageStore::from_dataset(&data);
        let (records, proposals) = synthetic_ris(&data, run);
        let instances = assemble_ris(&records, &proposals).map_err(e2s)?;
        let rows = robustness_report(model, &store, &instances, &ROBUSTNESS_RADII, run).map_err(e2s)?;
        let radii: Vec<usize> = rows.iter().map(|r| r.radius).collect();
        ensure(radii == ROBUSTNESS_RADII, || format!("run {run}: radii {radii:?}"))?;
        let (first, last) = (rows[0].miou, rows[rows.len() - 1].miou);
        if first >= last {
            held += 1;
        }
        summary.push(format!("{first:.2}/{last:.2}"));
    }
    let frac = held as f64 / ROBUSTNESS_RUNS as f64;
    let detail = format!(
        "radius 0 >= radius 15 in {held}/{ROBUSTNESS_RUNS} runs (need >= {MIN_ROBUSTNESS_TREND}); mIoU r0/r15: {}",
        summary.join(" ")
    );
    ensure(frac >= MIN_ROBUSTNESS_TREND, || detail.clone())?;
    Ok(detail)
}

fn vcr_vqa_plumbing(full: &TrainOutcome) -> Outcome {
    let model: &ModelBundle = &full.model;
    let data = &full.eval_data;
    let store = ImageStore::from_dataset(data);
    let vcr = synthetic_vcr(data, EVAL_SEED);
    for rec in vcr.iter().take(VCR_VQA_RECORDS) {
        let image = store.get(&rec.image_id).map_err(e2s)?;
        let ans = vcr_answer(model, image, rec, EVAL_SEED).map_err(e2s)?;
        // Independent recomputation of the four losses.
        let feats = model.features(image).map_err(e2s)?;
        let mut rng = instance_rng(EVAL_SEED, &rec.id);
        let mut zs = Vec::new();
        for rle in &rec.objects {
            let mask = Mask::from_rle(rle).map_err(e2s)?;
            let tokens: Vec<TokenId> = if mask.is_empty() {
                Vec::new()
            } else {
                let pts = sample_points_in_mask(&mask, model.k, &mut rng).map_err(e2s)?;
                tokenize_points(&encode_points(&pts).map_err(e2s)?, &PointTokenVocab::standard()).map_err(e2s)?
            };
            zs.push(model.region(&feats, &tokens).map_err(e2s)?.z_hat);
        }
        let prompt = vcr_prompt(&zs, &rec.question, &rec.choices, &model.vocab).map_err(e2s)?;
        let brute: Vec<f64> = rec
            .choices
            .iter()
            .map(|c| model.lm.loss(&prompt, &caption_target(&model.vocab, c)).unwrap().0 as f64)
            .collect();
        ensure(brute == ans.scores, || {
            format!("{}: scores {:?} vs {brute:?}", rec.id, ans.scores)
        })?;
        let mut best = 0;
        for j in 1..4 {
            if brute[j] < brute[best] {
                best = j;
            }
        }
        ensure(ans.choice == best + 1, || {
            format!("{}: chose {} not {}", rec.id, ans.choice, best + 1)
        })?;
        ensure(argmin_lowest(&ans.scores) == Some(best), || {
            "argmin disagreement".into()
        })?;
    }
    let vqa = synthetic_vqa(data, EVAL_SEED);
    for rec in vqa.iter().take(VCR_VQA_RECORDS) {
        let ans = vqa_answer(model, store.get(&rec.image_id).map_err(e2s)?, &rec.question).map_err(e2s)?;
        ensure(ans.point_tokens == 0, || {
            format!("{}: {} point tokens", rec.id, ans.point_tokens)
        })?;
        let template = format!("Question: {} Answer:", rec.question);
        ensure(question_text(&rec.question) == template, || "template text".into())?;
        ensure(
            ans.prompt.ends_with(&template) && ans.prompt.starts_with("<soft:"),
            || format!("{}: prompt {:?}", rec.id, ans.prompt),
        )?;
    }
    Ok(format!(
        "{} VCR answers equal the recomputed argmin, {} VQA prompts templated with zero point tokens",
        vcr.len().min(VCR_VQA_RECORDS),
        vqa.len().min(VCR_VQA_RECORDS)
    ))
}

fn pointprompt(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pointprompt"))
        .args(args)
        .output()
        .map_err(e2s)?;
    ensure(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(out.stdout)
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let root = tmp.path();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    fs::write(
        root.join("smoke.toml"),
        "images = 60\neval_images = 10\nmax_steps = 30\neval_every = 10\n",
    )
    .map_err(e2s)?;
    let mut compared = 0;

    for run in ["a", "b"] {
        pointprompt(&[
            "train",
            "--config",
            &p("smoke.toml"),
            "--out",
            &p(&format!("run-{run}")),
        ])?;
        pointprompt(&[
            "gen-data",
            "--out",
            &p(&format!("data-{run}")),
            "--config",
            &p("smoke.toml"),
            "--images",
            "8",
        ])?;
    }
    let (ra, rb) = (tree_bytes(&root.join("run-a")), tree_bytes(&root.join("run-b")));
    ensure(ra.iter().any(|(n, _)| n == "qformer.ckpt") && ra == rb, || {
        "run directories differ".into()
    })?;
    compared += ra.len();
    let (da, db) = (tree_bytes(&root.join("data-a")), tree_bytes(&root.join("data-b")));
    ensure(da == db, || "generated data differs".into())?;
    compared += da.len();

    let run = p("run-a");
    let images = p("data-a/images.jsonl");
    let evals: [(&str, &str); 5] = [
        ("caption", "regional.jsonl"),
        ("ris", "ris.jsonl"),
        ("robustness", "ris.jsonl"),
        ("vcr", "vcr.jsonl"),
        ("vqa", "vqa.jsonl"),
    ];
    for (task, file) in evals {
        let data = p(&format!("data-a/{file}"));
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let records = p(&format!("{task}-{rep}.jsonl"));
            let stdout = pointprompt(&[
                "eval",
                task,
                "--checkpoint",
                &run,
                "--images",
                &images,
                "--data",
                &data,
                "--proposals",
                &p("data-a/proposals.jsonl"),
                "--records",
                &records,
                "--seed",
                "5",
            ])?;
            outputs.push((stdout, fs::read(&records).map_err(e2s)?));
        }
        ensure(outputs[0] == outputs[1], || format!("eval {task} differs between runs"))?;
        compared += 2;
    }
    let e1 = pointprompt(&["encode", "0.324,0.643", "0.369,0.622"])?;
    ensure(
        e1 == pointprompt(&["encode", "0.324,0.643", "0.369,0.622"])? && e1 == b"[32 64] [37 62]\n",
        || "encode differs".into(),
    )?;
    compared += 1;
    Ok(format!(
        "{compared} artifacts byte-identical across repeated train, gen-data, eval, encode"
    ))
}

fn full_config(drop_points: bool) -> TrainConfig {
    TrainConfig {
        drop_point_tokens: drop_points,
        ..TrainConfig::default()
    }
}

fn main() -> ExitCode {
    let mut suite = Suite { failures: 0 };
    suite.check("codec exactness", codec_exactness);
    suite.check("gradient correctness", gradient_correctness);
    suite.check("frozen contract", frozen_contract);
    suite.check("mixed-batch contract", mixed_batch_contract);

    let start = Instant::now();
    let full = train(&full_config(false), None);
    let full_secs = start.elapsed().as_secs_f64();
    let ablation = train(&full_config(true), None);
    println!("info desk-scale training: {full_secs:.1}s for the full model");
    match (full, ablation) {
        (Ok(full), Ok(ablation)) => {
            suite.check("region conditioning", || region_conditioning(&full, &ablation));
            suite.check("attention grounding", || attention_grounding(&full));
            suite.check("RIS selection", || ris_selection(&full));
            suite.check("robustness protocol", || robustness_protocol(&full));
            suite.check("VCR/VQA plumbing", || vcr_vqa_plumbing(&full));
        }
        (full, ablation) => {
            let why = format!("training failed: {:?} / {:?}", full.err(), ablation.err());
            for name in [
                "region conditioning",
                "attention grounding",
                "RIS selection",
                "robustness protocol",
                "VCR/VQA plumbing",
            ] {
                suite.check(name, || Err(why.clone()));
            }
        }
    }
    suite.check("CLI determinism", cli_determinism);

    if suite.failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", suite.failures);
        ExitCode::FAILURE
    }
}
