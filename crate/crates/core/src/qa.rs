//! Answer vocabularies, answer scoring, accuracy and few-shot sampling.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{restrict_head, RestrictedHead};
use crate::model::{ItemInput, Model};
use crate::text::{Tokenizer, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VocabMode {
    /// The `k` most frequent answers, ties broken lexicographically.
    TopK(usize),
    /// Answers seen at least this many times.
    MinCount(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerVocab {
    pub answers: Vec<String>,
    /// Distinct training answers left out, for reporting.
    pub excluded: Vec<String>,
    index: HashMap<String, usize>,
}

pub fn build_vocab<S: AsRef<str>>(train_answers: &[S], mode: VocabMode) -> Result<AnswerVocab> {
    if train_answers.is_empty() {
        return Err(Error::Input("no training answers".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in train_answers {
        *counts.entry(a.as_ref()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let keep = |i: usize, count: usize| match mode {
        VocabMode::TopK(k) => i < k,
        VocabMode::MinCount(c) => count >= c,
    };
    let (mut answers, mut excluded) = (Vec::new(), Vec::new());
    for (i, (a, c)) in ranked.into_iter().enumerate() {
        if keep(i, c) { answers.push(a.to_string()) } else { excluded.push(a.to_string()) }
    }
    if answers.is_empty() {
        return Err(Error::Config(format!("answer vocabulary is empty under {mode:?}")));
    }
    Ok(AnswerVocab::from_answers(answers, excluded))
}

impl AnswerVocab {
    pub fn from_answers(answers: Vec<String>, excluded: Vec<String>) -> Self {
        let index = answers.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        AnswerVocab { answers, excluded, index }
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    /// Token ids for every answer; an answer containing `[UNK]` is a vocab error.
    pub fn token_ids(&self, tok: &Tokenizer) -> Result<Vec<Vec<u32>>> {
        self.answers
            .iter()
            .map(|a| {
                let ids = tok.encode(a);
                if ids.is_empty() || ids.contains(&UNK) {
                    Err(Error::Vocab(format!("answer {a:?} does not tokenize cleanly")))
                } else {
                    Ok(ids)
                }
            })
            .collect()
    }

    pub fn head(&self, tok: &Tokenizer, vocab_size: usize) -> Result<RestrictedHead> {
        restrict_head(vocab_size, &self.token_ids(tok)?)
    }
}

/// Answer scores and their ranking (best first, ties by index).
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub scores: Vec<f64>,
    pub order: Vec<usize>,
}

impl Ranking {
    pub fn best(&self) -> usize {
        self.order[0]
    }
}

/// Each answer scores the mean of its tokens' logits; `logits` is indexed by
/// restricted head row.
pub fn score_answers(logits: &[f64], answer_rows: &[Vec<usize>]) -> Ranking {
    let scores: Vec<f64> = answer_rows
        .iter()
        .map(|rows| rows.iter().map(|&r| logits[r]).sum::<f64>() / rows.len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ranking { scores, order }
}

/// A test item with a single `[MASK]` at `mask_position` of its text.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub answer: String,
    pub input: ItemInput,
    pub mask_position: usize,
}

pub trait QaPredictor: Sync {
    /// Index of the predicted answer in the vocabulary.
    fn predict(&self, item: &EvalItem) -> Result<usize>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub head: &'a RestrictedHead,
}

impl QaPredictor for ModelPredictor<'_> {
    fn predict(&self, item: &EvalItem) -> Result<usize> {
        let logits = self.model.predict_logits(&item.input, item.mask_position, Some(&self.head.rows))?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!("non-finite logits for item {}", item.id)));
        }
        Ok(score_answers(&logits, &self.head.answer_rows).best())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    pub correct: usize,
    /// Items whose answer is outside the vocabulary; all counted incorrect.
    pub excluded_oov: usize,
    pub vocab_size: usize,
}

/// Top-1 accuracy over `items`, evaluated in parallel.
pub fn evaluate<P: QaPredictor>(predictor: &P, items: &[EvalItem], vocab: &AnswerVocab) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let outcomes: Vec<Option<bool>> = items
        .par_iter()
        .map(|item| match vocab.index_of(&item.answer) {
            None => Ok(None),
            Some(truth) => predictor.predict(item).map(|p| Some(p == truth)),
        })
        .collect::<Result<_>>()?;
    let correct = outcomes.iter().filter(|o| **o == Some(true)).count();
    Ok(EvalReport {
        accuracy: correct as f64 / items.len() as f64,
        n: items.len(),
        correct,
        excluded_oov: outcomes.iter().filter(|o| o.is_none()).count(),
        vocab_size: vocab.len(),
    })
}

/// Accuracy of always answering the most frequent training answer.
pub fn majority_baseline<S: AsRef<str>>(train_answers: &[S], test_answers: &[S]) -> f64 {
    let Ok(vocab) = build_vocab(train_answers, VocabMode::TopK(1)) else {
        return 0.0;
    };
    let top = &vocab.answers[0];
    test_answers.iter().filter(|a| a.as_ref() == top).count() as f64 / test_answers.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FewShot {
    Fraction(f64),
    Shots(usize),
}

/// Seeded subsample without replacement, returned in ascending index order.
pub fn sample_fewshot(n: usize, request: FewShot, seed: u64) -> Result<Vec<usize>> {
    let k = match request {
        FewShot::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
            return Err(Error::Input(format!("fraction must lie in (0, 1], got {f}")));
        }
        FewShot::Fraction(f) => ((f * n as f64).round() as usize).max(1),
        FewShot::Shots(k) => k,
    };
    if k > n || k == 0 {
        return Err(Error::Input(format!("cannot draw {k} items from {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// `tasks` subsets of `shots` items, task `t` seeded with `seed + t`.
pub fn fewshot_tasks(n: usize, shots: usize, tasks: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    (0..tasks as u64)
        .map(|t| sample_fewshot(n, FewShot::Shots(shots), seed.wrapping_add(t)))
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_modes() {
        let answers = ["a", "a", "a", "b"];
        let v = build_vocab(&answers, VocabMode::MinCount(2)).unwrap();
        assert_eq!(v.answers, vec!["a"]);
        assert_eq!(v.excluded, vec!["b"]);
        let v = build_vocab(&["b", "a", "b", "a", "a", "b"], VocabMode::TopK(1)).unwrap();
        assert_eq!(v.answers, vec!["a"]);
        assert!(matches!(build_vocab(&["a", "b"], VocabMode::MinCount(2)), Err(Error::Config(_))));
        assert!(matches!(build_vocab::<&str>(&[], VocabMode::TopK(1)), Err(Error::Input(_))));
    }

    #[test]
    fn scoring_averages_token_logits() {
        let r = score_answers(&[1.0, 3.0, 0.5], &[vec![0, 1], vec![2], vec![0]]);
        assert_eq!(r.scores, vec![2.0, 0.5, 1.0]);
        assert_eq!(r.order, vec![0, 2, 1]);
        let single = score_answers(&[0.1, 0.9, -0.3, 0.9], &[vec![0], vec![1], vec![2], vec![3]]);
        assert_eq!(single.best(), 1);
    }

    struct Oracle(HashMap<String, usize>);
    impl QaPredictor for Oracle {
        fn predict(&self, item: &EvalItem) -> Result<usize> {
            Ok(self.0[&item.id])
        }
    }

    fn items(answers: &[&str]) -> Vec<EvalItem> {
        answers
            .iter()
            .enumerate()
            .map(|(i, a)| EvalItem {
                id: format!("q{i}"),
                answer: a.to_string(),
                input: ItemInput { video: None, ids: vec![1, 3, 2] },
                mask_position: 1,
            })
            .collect()
    }

    #[test]
    fn oracle_and_oov_accounting() {
        let vocab = AnswerVocab::from_answers(vec!["x".into(), "y".into()], vec![]);
        let answers = ["x", "y", "x", "y", "x", "y", "x", "y", "x", "y"];
        let its = items(&answers);
        let oracle = Oracle(its.iter().map(|i| (i.id.clone(), vocab.index_of(&i.answer).unwrap())).collect());
        let r = evaluate(&oracle, &its, &vocab).unwrap();
        assert_eq!((r.accuracy, r.n, r.excluded_oov), (1.0, 10, 0));

        let oov = items(&["z", "w"]);
        let always0 = Oracle(oov.iter().map(|i| (i.id.clone(), 0)).collect());
        let r = evaluate(&always0, &oov, &vocab).unwrap();
        assert_eq!((r.accuracy, r.excluded_oov), (0.0, 2));

        let mixed = items(&["x", "z"]);
        let r = evaluate(&Oracle(mixed.iter().map(|i| (i.id.clone(), 0)).collect()), &mixed, &vocab).unwrap();
        assert_eq!((r.accuracy, r.correct, r.excluded_oov), (0.5, 1, 1));
        assert!(matches!(evaluate(&oracle, &[], &vocab), Err(Error::Input(_))));
    }

    #[test]
    fn fewshot_sampling() {
        assert_eq!(sample_fewshot(50, FewShot::Fraction(1.0), 3).unwrap(), (0..50).collect::<Vec<_>>());
        assert_eq!(sample_fewshot(1000, FewShot::Fraction(0.01), 3).unwrap().len(), 10);
        let a = sample_fewshot(1000, FewShot::Shots(32), 1).unwrap();
        let b = sample_fewshot(1000, FewShot::Shots(32), 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, sample_fewshot(1000, FewShot::Shots(32), 1).unwrap());
        let tasks = fewshot_tasks(1000, 32, 10, 7).unwrap();
        assert_eq!(tasks.len(), 10);
        assert!(tasks.iter().all(|t| t.len() == 32));
        assert!(tasks.windows(2).all(|w| w[0] != w[1]));
        assert!(matches!(sample_fewshot(10, FewShot::Shots(11), 0), Err(Error::Input(_))));
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }

    #[test]
    fn majority() {
        assert_eq!(majority_baseline(&["a", "a", "b"], &["a", "b", "b", "b"]), 0.25);
    }
}
