use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde_json::{json, Value};

use mmprompt::checkpoint::{inspect as inspect_checkpoint, load_checkpoint, save_checkpoint, save_prompts_delta};
use mmprompt::config::{parse_pairs, RunConfig, VocabFlag};
use mmprompt::data::{load_manifest, split, ManifestItem, SynthCorpus};
use mmprompt::gradsuite::{self, Fault};
use mmprompt::model::Model;
use mmprompt::pipeline::{self, Finetuned, VocabChoice};
use mmprompt::qa::{build_vocab, fewshot_tasks, mean_std, sample_fewshot, AnswerVocab, EvalReport, FewShot, VocabMode};
use mmprompt::text::{Template, Tokenizer};
use mmprompt::train::Regime;
use mmprompt::{Error, Result};

use crate::{MapperArg, RegimeArg, RunArgs, Switch, SynthArgs, VocabArg};

/// Model keys a run may change on top of a loaded checkpoint.
const MUTABLE_MODEL_KEYS: [&str; 3] = ["reparam", "prompt_dim", "dropout"];

struct Resolved {
    config: RunConfig,
    /// Keys set by the config file or the command line.
    explicit: BTreeSet<String>,
}

/// Config file, then positional overrides, then dedicated flags.
fn resolve(args: &RunArgs) -> Result<Resolved> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        pairs.extend(parse_pairs(&text)?);
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    let on = |s: Switch| match s {
        Switch::On => "on",
        Switch::Off => "off",
    };
    let flags: [(&str, Option<String>); 13] = [
        ("seed", args.seed.map(|s| s.to_string())),
        ("manifest", args.manifest.as_ref().map(|p| p.display().to_string())),
        ("checkpoint", args.checkpoint.as_ref().map(|p| p.display().to_string())),
        ("regime", args.regime.map(|r| match r {
            RegimeArg::All => "all".into(),
            RegimeArg::Prompts => "prompts".into(),
        })),
        ("template", args.template.map(|t| t.to_string())),
        ("vocab", args.vocab.map(|v| match v {
            VocabArg::Topk => "topk".into(),
            VocabArg::Mincount => "mincount".into(),
            VocabArg::Auto => "auto".into(),
        })),
        ("fraction", args.fraction.map(|f| f.to_string())),
        ("shots", args.shots.map(|s| s.to_string())),
        ("tasks", args.tasks.map(|t| t.to_string())),
        ("reparam", args.reparam.map(|s| on(s).into())),
        ("mapper", args.mapper.map(|m| match m {
            MapperArg::Vpn => "vpn".into(),
            MapperArg::Linear => "linear".into(),
        })),
        ("adapters", args.adapters.map(|s| on(s).into())),
        ("split", args.split.clone()),
    ];
    pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    let mut config = RunConfig::default();
    config.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let explicit = pairs.into_iter().map(|(k, _)| k).collect();
    Ok(Resolved { config, explicit })
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{key} is required (flag --{key} or config key {key})")))
}

fn out_dir(args: &RunArgs) -> Result<&Path> {
    let out = args.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn print(value: &Value) -> Result<ExitCode> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        // A closed reader (e.g. `| head`) is not a failure of the command.
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(Error::Io { path: PathBuf::from("<stdout>"), source: e })
        }
        _ => Ok(ExitCode::SUCCESS),
    }
}

fn template(config: &RunConfig) -> Result<Template> {
    Template::from_index(config.run.template)
}

pub fn pretrain(args: &RunArgs) -> Result<ExitCode> {
    let Resolved { mut config, explicit } = resolve(args)?;
    if !explicit.contains("base_lr") {
        config.train.base_lr = mmprompt::train::PRETRAIN_BASE_LR;
    }
    if config.run.regime != Regime::All {
        return Err(Error::Config("pretraining trains every new parameter; regime must be all".into()));
    }
    let out = out_dir(args)?;
    let items = load_manifest(required(&config.run.manifest, "manifest")?)?;
    let pre = split(&items, "pretrain");
    let tok = pipeline::build_tokenizer(&items, config.model.vocab_size)?;
    let mut model = Model::new(config.model.clone(), config.train.seed)?;
    write_text(&out.join("config.cfg"), &config.to_text())?;

    let log_path = out.join("steps.jsonl");
    let mut log = create(&log_path)?;
    let (trainer, epochs) = pipeline::pretrain(&mut model, &tok, &pre, &config.train, Some(&mut log))?;
    log.flush().map_err(|e| Error::Io { path: log_path, source: e })?;
    for e in &epochs {
        eprintln!("epoch {} loss {:.4} ({:.0} tokens/s)", e.epoch, e.mean_loss, e.tokens_per_sec);
    }
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ckpt, &model, &tok, Some(&trainer.adam))?;
    let summary = json!({
        "command": "pretrain",
        "items": pre.len(),
        "steps": trainer.step,
        "epochs": epochs.iter().map(pipeline::EpochMetricsRow::from).collect::<Vec<_>>(),
        "param_counts": model.param_counts(),
        "checkpoint": ckpt,
    });
    write_json(&out.join("metrics.json"), &summary)?;
    print(&summary)
}

/// Loads a checkpoint and reconciles it with the run's model settings.
fn load_model(resolved: &Resolved) -> Result<(Model, Tokenizer, PathBuf)> {
    let path = required(&resolved.config.run.checkpoint, "checkpoint")?.to_path_buf();
    let loaded = load_checkpoint(&path)?;
    let mut model = loaded.model;
    let wanted = serde_json::to_value(&resolved.config.model)?;
    let stored = serde_json::to_value(&model.config)?;
    for key in resolved.explicit.iter().filter(|k| stored.get(k.as_str()).is_some()) {
        if !MUTABLE_MODEL_KEYS.contains(&key.as_str()) && wanted[key] != stored[key] {
            return Err(Error::Config(format!(
                "{key} = {} conflicts with the checkpoint's {key} = {}",
                wanted[key], stored[key]
            )));
        }
    }
    model.config.dropout = resolved.config.model.dropout;
    model.set_reparam(resolved.config.model.reparam, resolved.config.model.prompt_dim, resolved.config.train.seed)?;
    Ok((model, loaded.tokenizer, path))
}

fn vocab_choice(config: &RunConfig) -> VocabChoice {
    let (k, c) = (config.run.topk, config.run.min_count);
    match config.run.vocab {
        VocabFlag::Topk => VocabChoice::Fixed(VocabMode::TopK(k)),
        VocabFlag::Mincount => VocabChoice::Fixed(VocabMode::MinCount(c)),
        VocabFlag::Auto => VocabChoice::Auto { k, min_count: c },
    }
}

fn report_json(report: &EvalReport, split: &str, template: Template) -> Value {
    json!({
        "split": split,
        "accuracy": report.accuracy,
        "n": report.n,
        "correct": report.correct,
        "excluded_oov": report.excluded_oov,
        "vocab_size": report.vocab_size,
        "template": template.index(),
    })
}

fn save_vocab(path: &Path, vocab: &AnswerVocab) -> Result<()> {
    write_json(path, &json!({ "answers": vocab.answers, "excluded": vocab.excluded }))
}

fn load_vocab(path: &Path) -> Result<AnswerVocab> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let v: Value = serde_json::from_str(&text)?;
    let list = |key: &str| -> Result<Vec<String>> {
        serde_json::from_value(v.get(key).cloned().unwrap_or(Value::Array(vec![])))
            .map_err(|e| Error::Format { offset: 0, message: format!("{}: {e}", path.display()) })
    };
    Ok(AnswerVocab::from_answers(list("answers")?, list("excluded")?))
}

struct FinetuneRun<'a> {
    config: &'a RunConfig,
    base: &'a Model,
    tok: &'a Tokenizer,
    base_path: &'a Path,
    val: Vec<&'a ManifestItem>,
    eval: Vec<&'a ManifestItem>,
}

impl FinetuneRun<'_> {
    /// Trains on `train`, writes artifacts under `dir` and returns the
    /// evaluation report, if the evaluation split is non-empty.
    fn run(&self, train: &[&ManifestItem], dir: &Path) -> Result<(Finetuned, Option<Value>)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        let template = template(self.config)?;
        let log_path = dir.join("steps.jsonl");
        let mut log = create(&log_path)?;
        let ft = pipeline::finetune(
            self.base,
            self.tok,
            train,
            &self.val,
            template,
            vocab_choice(self.config),
            self.config.run.regime,
            &self.config.train,
            Some(&mut log),
        )?;
        log.flush().map_err(|e| Error::Io { path: log_path, source: e })?;
        match self.config.run.regime {
            Regime::Prompts => save_prompts_delta(&dir.join("prompts.ckpt"), &ft.model, self.base_path)?,
            Regime::All => save_checkpoint(&dir.join("model.ckpt"), &ft.model, self.tok, Some(&ft.trainer.adam))?,
        }
        save_vocab(&dir.join("vocab.json"), &ft.vocab)?;
        let report = if self.eval.is_empty() {
            None
        } else {
            let r = pipeline::evaluate_split(&ft.model, self.tok, &ft.vocab, &self.eval, template)?;
            let j = report_json(&r, &self.config.run.split, template);
            let mut w = create(&dir.join("eval.jsonl"))?;
            let line = json!({ "split": self.config.run.split, "accuracy": r.accuracy, "n": r.n });
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::Io { path: dir.join("eval.jsonl"), source: e })?;
            Some(j)
        };
        Ok((ft, report))
    }
}

pub fn finetune(args: &RunArgs) -> Result<ExitCode> {
    let resolved = resolve(args)?;
    let out = out_dir(args)?;
    let (base, tok, base_path) = load_model(&resolved)?;
    let mut config = resolved.config.clone();
    config.model = base.config.clone();
    if config.run.vocab == VocabFlag::Auto && config.run.shots > 0 && config.run.tasks > 1 {
        eprintln!("note: vocab auto mode trains both vocabularies for every task");
    }
    let items = load_manifest(required(&config.run.manifest, "manifest")?)?;
    let train = split(&items, "train");
    let run = FinetuneRun {
        config: &config,
        base: &base,
        tok: &tok,
        base_path: &base_path,
        val: split(&items, "val"),
        eval: split(&items, &config.run.split),
    };
    write_text(&out.join("config.cfg"), &config.to_text())?;
    let seed = config.train.seed;

    if config.run.shots > 0 {
        let tasks = fewshot_tasks(train.len(), config.run.shots, config.run.tasks, seed)?;
        let mut rows = Vec::new();
        let mut accuracies = Vec::new();
        for (t, idx) in tasks.iter().enumerate() {
            let subset: Vec<&ManifestItem> = idx.iter().map(|&i| train[i]).collect();
            let (ft, report) = run.run(&subset, &out.join(format!("task-{t}")))?;
            let acc = report.as_ref().map(|r| r["accuracy"].clone()).unwrap_or(Value::Null);
            if let Some(a) = acc.as_f64() {
                accuracies.push(a);
            }
            eprintln!("task {t}: {} items, accuracy {acc}", ft.summary.train_items);
            rows.push(json!({ "task": t, "items": idx, "summary": ft.summary, "report": report }));
        }
        let (mean, std) = mean_std(&accuracies);
        let summary = json!({
            "command": "finetune",
            "shots": config.run.shots,
            "tasks": rows,
            "accuracy_mean": if accuracies.is_empty() { Value::Null } else { mean.into() },
            "accuracy_std": if accuracies.is_empty() { Value::Null } else { std.into() },
        });
        write_json(&out.join("metrics.json"), &summary)?;
        return print(&summary);
    }

    let idx = sample_fewshot(train.len(), FewShot::Fraction(config.run.fraction), seed)?;
    let subset: Vec<&ManifestItem> = idx.iter().map(|&i| train[i]).collect();
    let (ft, report) = run.run(&subset, out)?;
    for e in &ft.summary.epochs {
        eprintln!("epoch {} loss {:.4}", e.epoch, e.mean_loss);
    }
    let summary = json!({
        "command": "finetune",
        "fraction": config.run.fraction,
        "items": subset.len(),
        "summary": ft.summary,
        "report": report,
    });
    write_json(&out.join("metrics.json"), &summary)?;
    print(&summary)
}

pub fn evaluate(args: &RunArgs) -> Result<ExitCode> {
    let resolved = resolve(args)?;
    let (model, tok, ckpt) = load_model(&resolved)?;
    let config = &resolved.config;
    let items = load_manifest(required(&config.run.manifest, "manifest")?)?;
    let beside = ckpt.parent().unwrap_or(Path::new(".")).join("vocab.json");
    let vocab = if beside.is_file() && !resolved.explicit.contains("vocab") {
        load_vocab(&beside)?
    } else {
        let mode = match config.run.vocab {
            VocabFlag::Topk => VocabMode::TopK(config.run.topk),
            VocabFlag::Mincount => VocabMode::MinCount(config.run.min_count),
            VocabFlag::Auto => return Err(Error::Config("vocab auto selects during fine-tuning; use topk or mincount".into())),
        };
        let answers: Vec<&str> = split(&items, "train").iter().map(|i| i.answer.as_str()).collect();
        if answers.is_empty() {
            return Err(Error::Input("building an answer vocabulary needs a train split".into()));
        }
        build_vocab(&answers, mode)?
    };
    let template = template(config)?;
    let report = pipeline::evaluate_split(&model, &tok, &vocab, &split(&items, &config.run.split), template)?;
    let j = report_json(&report, &config.run.split, template);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        write_json(&out.join("eval.json"), &j)?;
    }
    print(&j)
}

pub fn gradcheck(fault: Option<Fault>) -> Result<ExitCode> {
    let checks = gradsuite::run_suite(fault)?;
    let passed = checks.iter().all(|c| c.passed);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.block).collect();
    print(&json!({ "eps": gradsuite::EPS, "tol": gradsuite::TOL, "passed": passed, "failed": failed, "blocks": checks }))?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(4) })
}

pub fn synth_data(args: &SynthArgs) -> Result<ExitCode> {
    let corpus = SynthCorpus {
        classes: args.classes,
        pretrain: args.pretrain,
        train: args.train,
        val: args.val,
        test: args.test,
        frames: args.frames,
        feature_dim: args.feature_dim,
        seed: args.seed,
        ..SynthCorpus::default()
    };
    let items = corpus.generate(&args.out)?;
    print(&json!({ "items": items.len(), "manifest": args.out.join("manifest.jsonl"), "answers": corpus.answers() }))
}

pub fn inspect(path: &Path) -> Result<ExitCode> {
    print(&inspect_checkpoint(path)?)
}
