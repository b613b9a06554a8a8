//! Turns manifest items into pretraining, fine-tuning and evaluation examples,
//! and drives the end-to-end pretrain / fine-tune / evaluate loops.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::ManifestItem;
use crate::error::{Error, Result};
use crate::lm::RestrictedHead;
use crate::model::{ItemInput, Model};
use crate::qa::{build_vocab, evaluate, AnswerVocab, EvalItem, EvalReport, ModelPredictor, VocabMode};
use crate::tensor::Tensor;
use crate::text::{downstream_mask, mlm_mask, render_template, AnswerSlot, Template, Tokenizer, CLS, SEP};
use crate::train::{EpochMetrics, Labeled, Regime, TrainConfig, Trainer};
use crate::video::load_and_sample;

/// Sampled `[F, T]` features and frame validity.
pub type Video = (Tensor, Vec<bool>);

/// Reads and samples every item's features on the rayon pool.
pub fn load_videos(items: &[&ManifestItem], model: &Model) -> Result<Vec<Video>> {
    let (frames, dim) = (model.config.frames, model.config.frame_dim);
    items
        .par_iter()
        .map(|item| {
            let (t, valid) = load_and_sample(&item.feature_path, frames)?;
            if t.shape()[0] != dim {
                return Err(Error::Input(format!(
                    "{}: feature dim {} but the model expects {dim}",
                    item.feature_path.display(),
                    t.shape()[0]
                )));
            }
            Ok((t, valid))
        })
        .collect()
}

/// Builds a tokenizer over every caption, question, answer and subtitle.
pub fn build_tokenizer(items: &[ManifestItem], max_size: usize) -> Result<Tokenizer> {
    let texts = items.iter().flat_map(|i| {
        [Some(i.question.as_str()), Some(i.answer.as_str()), i.subtitles.as_deref(), i.caption.as_deref()]
            .into_iter()
            .flatten()
    });
    Tokenizer::build(texts, max_size)
}

/// `[CLS] caption [SEP]` with a fresh MLM mask drawn from `seed`. Labels are
/// full-vocabulary token ids.
pub fn pretrain_examples(
    items: &[&ManifestItem],
    videos: &[Video],
    tok: &Tokenizer,
    max_text_len: usize,
    mask_prob: f64,
    seed: u64,
) -> Result<Vec<Labeled>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items
        .iter()
        .zip(videos)
        .map(|(item, video)| {
            let caption = item
                .caption
                .as_deref()
                .ok_or_else(|| Error::Input(format!("item {} has no caption", item.id)))?;
            let mut ids = vec![CLS];
            ids.extend(tok.encode(caption).into_iter().take(max_text_len.saturating_sub(2)));
            ids.push(SEP);
            let masked = mlm_mask(&ids, mask_prob, &mut rng, &[])?;
            let labels = masked.labels.iter().map(|&(p, t)| (p, t as usize)).collect();
            Ok((ItemInput { video: Some(video.clone()), ids: masked.ids }, labels))
        })
        .collect()
}

/// QA examples with the answer slot masked; labels index `head.rows`.
/// Items whose answer is outside `vocab` are skipped and counted.
pub fn finetune_examples(
    items: &[&ManifestItem],
    videos: &[Video],
    tok: &Tokenizer,
    template: Template,
    vocab: &AnswerVocab,
    head: &RestrictedHead,
    max_text_len: usize,
) -> Result<(Vec<Labeled>, usize)> {
    let answer_ids = vocab.token_ids(tok)?;
    let mut out = Vec::new();
    let mut skipped = 0;
    for (item, video) in items.iter().zip(videos) {
        let Some(a) = vocab.index_of(&item.answer) else {
            skipped += 1;
            continue;
        };
        let rendered = render_template(
            tok,
            template,
            &item.question,
            AnswerSlot::Tokens(&answer_ids[a]),
            item.subtitles.as_deref(),
            max_text_len,
        )?;
        let masked = downstream_mask(&rendered);
        let labels = masked
            .labels
            .iter()
            .zip(&head.answer_rows[a])
            .map(|(&(p, _), &row)| (p, row))
            .collect();
        out.push((ItemInput { video: Some(video.clone()), ids: masked.ids }, labels));
    }
    Ok((out, skipped))
}

/// Evaluation items with a single `[MASK]` answer slot.
pub fn eval_items(
    items: &[&ManifestItem],
    videos: &[Video],
    tok: &Tokenizer,
    template: Template,
    max_text_len: usize,
) -> Result<Vec<EvalItem>> {
    items
        .iter()
        .zip(videos)
        .map(|(item, video)| {
            let r = render_template(tok, template, &item.question, AnswerSlot::Mask, item.subtitles.as_deref(), max_text_len)?;
            Ok(EvalItem {
                id: item.id.clone(),
                answer: item.answer.clone(),
                input: ItemInput { video: Some(video.clone()), ids: r.ids },
                mask_position: r.answer_positions[0],
            })
        })
        .collect()
}

/// Runs caption MLM for `config.epochs` epochs with every trainable group.
pub fn pretrain(
    model: &mut Model,
    tok: &Tokenizer,
    items: &[&ManifestItem],
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(Trainer, Vec<EpochMetrics>)> {
    if items.is_empty() {
        return Err(Error::Input("no pretraining items".into()));
    }
    let videos = load_videos(items, model)?;
    let mut trainer = Trainer::new(config.clone(), Regime::All, config.total_steps(items.len()))?;
    let mut metrics = Vec::new();
    for epoch in 0..config.epochs {
        if trainer.finished() {
            break;
        }
        let seed = config.seed.wrapping_add(1000 + epoch as u64);
        let data = pretrain_examples(items, &videos, tok, model.config.max_text_len(), config.mask_prob, seed)?;
        metrics.push(trainer.train_epoch(model, &data, None, epoch, reborrow(&mut log))?);
    }
    Ok((trainer, metrics))
}

fn reborrow<'a>(log: &'a mut Option<&mut dyn Write>) -> Option<&'a mut dyn Write> {
    match log {
        Some(w) => Some(&mut **w),
        None => None,
    }
}

/// Answer vocabulary selection for fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabChoice {
    Fixed(VocabMode),
    /// Fine-tune with top-k and with min-count and keep whichever scores
    /// higher on the validation items.
    Auto { k: usize, min_count: usize },
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneSummary {
    pub train_items: usize,
    pub skipped_oov: usize,
    pub steps: usize,
    pub vocab: String,
    pub vocab_size: usize,
    pub epochs: Vec<EpochMetricsRow>,
    /// Validation report for each candidate vocabulary in auto mode.
    pub candidates: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochMetricsRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub first_loss: f64,
    pub last_loss: f64,
}

impl From<&EpochMetrics> for EpochMetricsRow {
    fn from(m: &EpochMetrics) -> Self {
        EpochMetricsRow { epoch: m.epoch, mean_loss: m.mean_loss, first_loss: m.first_loss, last_loss: m.last_loss }
    }
}

pub struct Finetuned {
    pub model: Model,
    pub vocab: AnswerVocab,
    pub trainer: Trainer,
    pub summary: FinetuneSummary,
}

fn vocab_label(mode: VocabMode) -> String {
    match mode {
        VocabMode::TopK(k) => format!("topk:{k}"),
        VocabMode::MinCount(c) => format!("mincount:{c}"),
    }
}

/// Fine-tunes a copy of `base` on QA items under one vocabulary.
#[allow(clippy::too_many_arguments)]
fn finetune_with(
    base: &Model,
    tok: &Tokenizer,
    train: &[&ManifestItem],
    videos: &[Video],
    template: Template,
    mode: VocabMode,
    regime: Regime,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Finetuned> {
    let answers: Vec<&str> = train.iter().map(|i| i.answer.as_str()).collect();
    let vocab = build_vocab(&answers, mode)?;
    let head = vocab.head(tok, base.config.vocab_size)?;
    let (data, skipped) = finetune_examples(train, videos, tok, template, &vocab, &head, base.config.max_text_len())?;
    let mut model = base.clone();
    let mut trainer = Trainer::new(config.clone(), regime, config.total_steps(data.len()))?;
    let mut epochs = Vec::new();
    for epoch in 0..config.epochs {
        if trainer.finished() {
            break;
        }
        epochs.push(trainer.train_epoch(&mut model, &data, Some(&head.rows), epoch, reborrow(&mut log))?);
    }
    let summary = FinetuneSummary {
        train_items: data.len(),
        skipped_oov: skipped,
        steps: trainer.step,
        vocab: vocab_label(mode),
        vocab_size: vocab.len(),
        epochs: epochs.iter().map(EpochMetricsRow::from).collect(),
        candidates: Vec::new(),
    };
    Ok(Finetuned { model, vocab, trainer, summary })
}

/// Fine-tunes on `train` QA items. In auto mode both vocabularies are
/// trained and the one with the higher accuracy on `val` is returned; the
/// step log then holds only the winner's lines.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    base: &Model,
    tok: &Tokenizer,
    train: &[&ManifestItem],
    val: &[&ManifestItem],
    template: Template,
    vocab: VocabChoice,
    regime: Regime,
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<Finetuned> {
    if train.is_empty() {
        return Err(Error::Input("no fine-tuning items".into()));
    }
    let videos = load_videos(train, base)?;
    let (k, min_count) = match vocab {
        VocabChoice::Fixed(mode) => return finetune_with(base, tok, train, &videos, template, mode, regime, config, log),
        VocabChoice::Auto { k, min_count } => (k, min_count),
    };
    if val.is_empty() {
        return Err(Error::Config("vocab auto mode needs a non-empty val split".into()));
    }
    let val_videos = load_videos(val, base)?;
    let val_items = eval_items(val, &val_videos, tok, template, base.config.max_text_len())?;
    let mut best: Option<(f64, VocabMode)> = None;
    let mut candidates = Vec::new();
    for mode in [VocabMode::TopK(k), VocabMode::MinCount(min_count)] {
        let run = match finetune_with(base, tok, train, &videos, template, mode, regime, config, None) {
            Ok(run) => run,
            // A threshold that leaves no answers is not a candidate.
            Err(Error::Config(_)) => continue,
            Err(e) => return Err(e),
        };
        let report = evaluate_model(&run.model, tok, &run.vocab, &val_items)?;
        candidates.push((vocab_label(mode), report.accuracy));
        if best.is_none_or(|(acc, _)| report.accuracy > acc) {
            best = Some((report.accuracy, mode));
        }
    }
    let (_, mode) = best.ok_or_else(|| Error::Config("no usable answer vocabulary".into()))?;
    // Retrain the winner so the step log covers exactly one run.
    let mut run = finetune_with(base, tok, train, &videos, template, mode, regime, config, log)?;
    run.summary.candidates = candidates;
    Ok(run)
}

pub fn evaluate_model(model: &Model, tok: &Tokenizer, vocab: &AnswerVocab, items: &[EvalItem]) -> Result<EvalReport> {
    let head = vocab.head(tok, model.config.vocab_size)?;
    evaluate(&ModelPredictor { model, head: &head }, items, vocab)
}

/// Loads, renders and scores `items` under `template`.
pub fn evaluate_split(
    model: &Model,
    tok: &Tokenizer,
    vocab: &AnswerVocab,
    items: &[&ManifestItem],
    template: Template,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let videos = load_videos(items, model)?;
    let eval = eval_items(items, &videos, tok, template, model.config.max_text_len())?;
    evaluate_model(model, tok, vocab, &eval)
}
