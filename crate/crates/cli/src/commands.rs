use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pointprompt::codec::{encode_points, Point2D};
use pointprompt::data::narrative::{align_segments_to_trace, parse_narratives};
use pointprompt::data::{dataset_stats, make_synthetic_dataset, RegionCaptionPair};
use pointprompt::model::ModelBundle;
use pointprompt::tasks::synthetic::{synthetic_ris, synthetic_vcr, synthetic_vqa};
use pointprompt::tasks::{
    assemble_ris, compute_miou, evaluate_captions, read_jsonl, ris_select, robustness_report, vcr_answer, vqa_answer,
    write_jsonl, ImageStore, ProposalRecord, RisRecord, VcrRecord, VqaRecord,
};
use pointprompt::train::{train, TrainConfig};
use serde::Serialize;

use crate::service::{self, ServiceState};
use crate::DEFAULT_SEED;

#[derive(Debug, Parser)]
#[command(name = "pointprompt", version, about = "Region prompting with point tokens")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the token string for points given as `x,y` pairs in [0,1].
    Encode {
        #[arg(allow_hyphen_values = true)]
        points: Vec<String>,
    },
    /// Train the query transformer and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic split and its task files as JSON lines.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training config whose scene settings to reuse; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
        /// Overrides the split's image count.
        #[arg(long)]
        images: Option<usize>,
        /// Seeds proposal order and distractor choice.
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Run a zero-shot task over a record file.
    Eval {
        #[arg(value_enum)]
        task: Task,
        /// Run directory holding `qformer.ckpt` and `lm.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Mask proposals, required by `ris` and `robustness`.
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,3,7,15")]
        radii: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Per-instance results as JSON lines.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Caption without point tokens.
        #[arg(long)]
        drop_points: bool,
    },
    /// Summarize a pair file, or a narrative file with `--narratives`.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        narratives: bool,
        /// Fail on the first invalid narrative line instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Serve the JSON endpoints for one checkpoint.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Caption,
    Ris,
    Vcr,
    Vqa,
    Robustness,
}

/// Executes a command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Encode { points } => encode(points),
        Command::Train { config, out, seed } => train_cmd(config, out, *seed),
        Command::GenData {
            out,
            config,
            split,
            images,
            seed,
        } => gen_data(out, config.as_deref(), *split, *images, *seed),
        Command::Eval {
            task,
            checkpoint,
            images,
            data,
            proposals,
            radii,
            seed,
            records,
            drop_points,
        } => {
            let model = ModelBundle::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let store = ImageStore::load(images)?;
            let ctx = EvalContext {
                model: &model,
                images: &store,
                data,
                proposals: proposals.as_deref(),
                seed: *seed,
                records: records.as_deref(),
            };
            match task {
                Task::Caption => eval_caption(&ctx, *drop_points),
                Task::Ris => eval_ris(&ctx),
                Task::Robustness => eval_robustness(&ctx, radii),
                Task::Vcr => eval_vcr(&ctx),
                Task::Vqa => eval_vqa(&ctx),
            }
        }
        Command::Stats {
            data,
            narratives,
            strict,
        } => stats(data, *narratives, *strict),
        Command::Serve {
            checkpoint,
            images,
            host,
            port,
        } => {
            let state = ServiceState {
                model: ModelBundle::load(checkpoint)?,
                images: ImageStore::load(images)?,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(state, &format!("{host}:{port}")))?;
            Ok(String::new())
        }
    }
}

pub fn parse_point(arg: &str) -> Result<Point2D> {
    let (x, y) = arg
        .split_once(',')
        .with_context(|| format!("point {arg:?} is not of the form x,y"))?;
    let x: f64 = x.trim().parse().with_context(|| format!("bad x in {arg:?}"))?;
    let y: f64 = y.trim().parse().with_context(|| format!("bad y in {arg:?}"))?;
    Ok(Point2D::new(x, y)?)
}

fn encode(args: &[String]) -> Result<String> {
    // Accept both `0.1,0.2 0.3,0.4` as separate args and as one quoted arg.
    let points = args
        .iter()
        .flat_map(|a| a.split_whitespace())
        .map(parse_point)
        .collect::<Result<Vec<_>>>()?;
    Ok(format!("{}\n", encode_points(&points)?))
}

fn train_cmd(config: &Path, out: &Path, seed: Option<u64>) -> Result<String> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = train(&cfg, Some(out))?;
    let report = &outcome.report;
    let mut s = String::new();
    writeln!(s, "steps: {}", report.steps.len())?;
    if let Some(last) = report.steps.last() {
        writeln!(s, "final_loss: {:.4}", last.loss)?;
    }
    if let Some(best) = report.best_eval_loss {
        writeln!(s, "best_eval_loss: {best:.4}")?;
    }
    writeln!(s, "run_dir: {}", out.display())?;
    Ok(s)
}

fn gen_data(out: &Path, config: Option<&Path>, split: Split, images: Option<usize>, seed: u64) -> Result<String> {
    let cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut syn = match split {
        Split::Train => cfg.synthetic_config(),
        Split::Eval => cfg.eval_synthetic_config(),
    };
    if let Some(n) = images {
        syn.images = n;
    }
    let ds = make_synthetic_dataset(&syn)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (ris, proposals) = synthetic_ris(&ds, seed);
    let vcr = synthetic_vcr(&ds, seed);
    let vqa = synthetic_vqa(&ds, seed);
    write_jsonl(&out.join("images.jsonl"), &ds.images)?;
    write_jsonl(&out.join("regional.jsonl"), &ds.regional)?;
    write_jsonl(&out.join("global.jsonl"), &ds.global)?;
    write_jsonl(&out.join("ris.jsonl"), &ris)?;
    write_jsonl(&out.join("proposals.jsonl"), &proposals)?;
    write_jsonl(&out.join("vcr.jsonl"), &vcr)?;
    write_jsonl(&out.join("vqa.jsonl"), &vqa)?;
    let mut s = String::new();
    writeln!(s, "images: {}", ds.images.len())?;
    writeln!(s, "regional: {}", ds.regional.len())?;
    writeln!(s, "global: {}", ds.global.len())?;
    writeln!(s, "ris: {} ({} proposals)", ris.len(), proposals.len())?;
    writeln!(s, "vcr: {}", vcr.len())?;
    writeln!(s, "vqa: {}", vqa.len())?;
    Ok(s)
}

struct EvalContext<'a> {
    model: &'a ModelBundle,
    images: &'a ImageStore,
    data: &'a Path,
    proposals: Option<&'a Path>,
    seed: u64,
    records: Option<&'a Path>,
}

impl EvalContext<'_> {
    fn save<T: Serialize>(&self, rows: &[T]) -> Result<()> {
        if let Some(p) = self.records {
            write_jsonl(p, rows)?;
        }
        Ok(())
    }

    fn ris_instances(&self) -> Result<Vec<pointprompt::tasks::RisInstance>> {
        let Some(prop_path) = self.proposals else {
            bail!("--proposals is required for this task");
        };
        let records: Vec<RisRecord> = read_jsonl(self.data)?;
        let proposals: Vec<ProposalRecord> = read_jsonl(prop_path)?;
        Ok(assemble_ris(&records, &proposals)?)
    }
}

fn eval_caption(ctx: &EvalContext, drop_points: bool) -> Result<String> {
    let pairs: Vec<RegionCaptionPair> = read_jsonl(ctx.data)?;
    let report = evaluate_captions(ctx.model, ctx.images, &pairs, ctx.seed, drop_points)?;
    let mut s = String::from("image_id\texact\treference\tgenerated\n");
    for r in &report.records {
        writeln!(s, "{}\t{}\t{}\t{}", r.image_id, r.exact, r.reference, r.generated)?;
    }
    let exact = report.records.iter().filter(|r| r.exact).count();
    writeln!(s, "exact: {exact}/{}", report.records.len())?;
    writeln!(s, "token_accuracy: {:.4}", report.token_accuracy)?;
    ctx.save(&report.records)?;
    Ok(s)
}

#[derive(Serialize)]
struct RisRow {
    id: String,
    image_id: String,
    index: usize,
    scores: Vec<f64>,
    iou: Option<f64>,
}

fn eval_ris(ctx: &EvalContext) -> Result<String> {
    let instances = ctx.ris_instances()?;
    let mut rows = Vec::with_capacity(instances.len());
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for inst in &instances {
        let image = ctx.images.get(&inst.image_id)?;
        let sel = ris_select(ctx.model, image, inst, ctx.seed)?;
        let chosen = &inst.proposals[sel.index];
        let iou = match &inst.ground_truth {
            Some(gt) => {
                preds.push(chosen.clone());
                gts.push(gt.clone());
                Some(chosen.iou(gt)?)
            }
            None => None,
        };
        rows.push(RisRow {
            id: inst.id.clone(),
            image_id: inst.image_id.clone(),
            index: sel.index,
            scores: sel.scores,
            iou,
        });
    }
    let mut s = String::from("id\tselected\tiou\n");
    for r in &rows {
        let iou = r.iou.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        writeln!(s, "{}\t{}\t{iou}", r.id, r.index)?;
    }
    if !gts.is_empty() {
        writeln!(s, "mIoU: {:.4}", compute_miou(&preds, &gts)?)?;
    }
    ctx.save(&rows)?;
    Ok(s)
}

fn eval_robustness(ctx: &EvalContext, radii: &[usize]) -> Result<String> {
    let instances = ctx.ris_instances()?;
    let rows = robustness_report(ctx.model, ctx.images, &instances, radii, ctx.seed)?;
    let mut s = String::from("radius\tmIoU\n");
    for r in &rows {
        writeln!(s, "{}\t{:.4}", r.radius, r.miou)?;
    }
    ctx.save(&rows)?;
    Ok(s)
}

#[derive(Serialize)]
struct ChoiceRow {
    id: String,
    answer: String,
    correct: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<[f64; 4]>,
}

fn accuracy_line(rows: &[ChoiceRow]) -> Option<String> {
    let judged: Vec<bool> = rows.iter().filter_map(|r| r.correct).collect();
    (!judged.is_empty()).then(|| {
        let right = judged.iter().filter(|&&c| c).count();
        format!(
            "accuracy: {:.4} ({right}/{})\n",
            right as f64 / judged.len() as f64,
            judged.len()
        )
    })
}

fn eval_vcr(ctx: &EvalContext) -> Result<String> {
    let records: Vec<VcrRecord> = read_jsonl(ctx.data)?;
    let mut rows = Vec::with_capacity(records.len());
    for rec in &records {
        let ans = vcr_answer(ctx.model, ctx.images.get(&rec.image_id)?, rec, ctx.seed)?;
        rows.push(ChoiceRow {
            id: rec.id.clone(),
            answer: ans.choice.to_string(),
            correct: rec.answer.map(|a| a == ans.choice),
            scores: Some(ans.scores),
        });
    }
    let mut s = String::from("id\tchoice\n");
    for r in &rows {
        writeln!(s, "{}\t{}", r.id, r.answer)?;
    }
    s.extend(accuracy_line(&rows));
    ctx.save(&rows)?;
    Ok(s)
}

fn eval_vqa(ctx: &EvalContext) -> Result<String> {
    let records: Vec<VqaRecord> = read_jsonl(ctx.data)?;
    let mut rows = Vec::with_capacity(records.len());
    for rec in &records {
        let ans = vqa_answer(ctx.model, ctx.images.get(&rec.image_id)?, &rec.question)?;
        rows.push(ChoiceRow {
            id: rec.id.clone(),
            correct: rec.answer.as_ref().map(|a| a.trim() == ans.answer.trim()),
            answer: ans.answer,
            scores: None,
        });
    }
    let mut s = String::from("id\tanswer\n");
    for r in &rows {
        writeln!(s, "{}\t{}", r.id, r.answer)?;
    }
    s.extend(accuracy_line(&rows));
    ctx.save(&rows)?;
    Ok(s)
}

fn stats(data: &Path, narratives: bool, strict: bool) -> Result<String> {
    let mut s = String::new();
    let pairs: Vec<RegionCaptionPair> = if narratives {
        let file = File::open(data).with_context(|| format!("opening {}", data.display()))?;
        let parsed = parse_narratives(BufReader::new(file), strict)?;
        let mut pairs = Vec::new();
        let mut dropped = 0;
        for rec in &parsed.records {
            let a = align_segments_to_trace(rec);
            dropped += a.dropped;
            pairs.extend(a.pairs);
        }
        writeln!(s, "records: {}", parsed.records.len())?;
        writeln!(s, "rejected_lines: {}", parsed.rejected.len())?;
        writeln!(s, "dropped_segments: {dropped}")?;
        pairs
    } else {
        read_jsonl(data)?
    };
    let st = dataset_stats(&pairs);
    writeln!(s, "pairs: {}", st.pairs)?;
    writeln!(s, "images: {}", st.images)?;
    writeln!(s, "empty_scribbles: {}", st.empty_scribbles)?;
    writeln!(s, "mean_points: {:.3}", st.mean_points)?;
    writeln!(s, "mean_words: {:.3}", st.mean_words)?;
    Ok(s)
}
