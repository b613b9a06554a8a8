//! Word-level tokenizer, input templates and masking policies.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

const PUNCTUATION: &[char] = &['?', '.', ',', '!', ':', ';'];

/// Lowercases, splits punctuation into separate words and collapses whitespace.
/// Special-token literals such as `[MASK]` survive untouched.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        if SPECIALS.contains(&raw) {
            words.push(raw.to_string());
            continue;
        }
        let mut current = String::new();
        let mut rest = raw;
        // Specials glued to punctuation, e.g. "[MASK].".
        if let Some(s) = SPECIALS.iter().find(|s| raw.starts_with(**s)) {
            words.push((*s).to_string());
            rest = &raw[s.len()..];
        }
        for ch in rest.chars() {
            if PUNCTUATION.contains(&ch) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Lowercased, whitespace-collapsed text with trailing question marks removed.
pub fn normalize_question(text: &str) -> String {
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    joined.trim_end_matches(|c: char| c == '?' || c.is_whitespace()).to_string()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Vocab(format!("vocabulary must start with {SPECIALS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Tokenizer { tokens, index })
    }

    /// Specials, then template and punctuation words, then corpus words by
    /// descending frequency (ties lexicographic), up to `max_size` entries.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for w in normalize_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in Template::ALL.iter().flat_map(|t| t.literal_words()).chain(PUNCTUATION.iter().map(|c| c.to_string())) {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        if tokens.len() > max_size {
            return Err(Error::Config(format!("vocabulary size {max_size} cannot hold the fixed words")));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(w, _)| !tokens.contains(w) && !SPECIALS.contains(&w.as_str())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        tokens.extend(ranked.into_iter().take(max_size - tokens.len()).map(|(w, _)| w));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalize_words(text).iter().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Space-joined words with punctuation attached to the preceding word.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.tokens.get(id as usize).map_or("[UNK]", String::as_str);
            let is_punct = w.len() == 1 && w.chars().all(|c| PUNCTUATION.contains(&c));
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// The four question-answering input designs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Template {
    /// `[CLS] <Q>? [MASK]. <S> [SEP]`
    Bare = 1,
    /// `[CLS] Answer the question: <Q>? [MASK]. <S> [SEP]`
    Instruction = 2,
    /// `[CLS] <Q>? Answer: [MASK]. <S> [SEP]`
    AnswerCue = 3,
    /// `[CLS] Question: <Q>? Answer: [MASK]. Subtitles: <S> [SEP]`
    Labeled = 4,
}

impl Template {
    pub const ALL: [Template; 4] = [Template::Bare, Template::Instruction, Template::AnswerCue, Template::Labeled];

    pub fn from_index(i: u8) -> Result<Self> {
        Self::ALL
            .get((i as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Config(format!("template must be 1..4, got {i}")))
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    fn parts(self) -> (&'static str, &'static str, &'static str) {
        // (before question, between "?" and answer slot, subtitle label)
        match self {
            Template::Bare => ("", "", ""),
            Template::Instruction => ("Answer the question: ", "", ""),
            Template::AnswerCue => ("", "Answer: ", ""),
            Template::Labeled => ("Question: ", "Answer: ", "Subtitles: "),
        }
    }

    fn literal_words(self) -> Vec<String> {
        let (a, b, c) = self.parts();
        normalize_words(&format!("{a} {b} {c}"))
    }

    /// The filled-in template as text. `answer_slot` is usually `[MASK]`.
    pub fn render_text(self, question: &str, answer_slot: &str, subtitles: Option<&str>) -> String {
        let (before, cue, label) = self.parts();
        let q = normalize_question(question);
        let mut s = format!("[CLS] {before}{q}? {cue}{answer_slot}. ");
        if let Some(sub) = subtitles.map(|s| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()).filter(|s| !s.is_empty()) {
            s.push_str(&format!("{label}{sub} "));
        }
        s.push_str("[SEP]");
        s
    }
}

/// What fills the answer slot.
#[derive(Clone, Debug)]
pub enum AnswerSlot<'a> {
    /// One `[MASK]`, as at inference.
    Mask,
    /// The answer's tokens, later hidden by [`downstream_mask`].
    Tokens(&'a [u32]),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub ids: Vec<u32>,
    /// Positions of the answer slot.
    pub answer_positions: Vec<usize>,
    pub truncated: bool,
}

/// Tokenizes a template. When longer than `max_len`, subtitle tokens are
/// dropped from the end first, then question tokens; at least one question
/// token is always kept.
pub fn render_template(
    tok: &Tokenizer,
    template: Template,
    question: &str,
    answer: AnswerSlot<'_>,
    subtitles: Option<&str>,
    max_len: usize,
) -> Result<Rendered> {
    let (before, cue, label) = template.parts();
    let mut q = tok.encode(&normalize_question(question));
    if q.is_empty() {
        return Err(Error::Input("empty question".into()));
    }
    let mut subs = subtitles.map(|s| tok.encode(s)).unwrap_or_default();
    let head = [vec![CLS], tok.encode(before)].concat();
    let qmark = tok.encode("?");
    let cue = tok.encode(cue);
    let answer_ids: Vec<u32> = match answer {
        AnswerSlot::Mask => vec![MASK],
        AnswerSlot::Tokens([]) => return Err(Error::Input("empty answer".into())),
        AnswerSlot::Tokens(t) => t.to_vec(),
    };
    let period = tok.encode(".");
    let label = tok.encode(label);

    let fixed = head.len() + qmark.len() + cue.len() + answer_ids.len() + period.len() + 1;
    let sub_len = |subs: &[u32]| if subs.is_empty() { 0 } else { label.len() + subs.len() };
    let mut truncated = false;
    while fixed + q.len() + sub_len(&subs) > max_len {
        truncated = true;
        if !subs.is_empty() {
            subs.pop();
        } else if q.len() > 1 {
            q.pop();
        } else {
            return Err(Error::Input(format!("template needs {} tokens but the limit is {max_len}", fixed + 1)));
        }
    }

    let mut ids = head;
    ids.extend(&q);
    ids.extend(&qmark);
    ids.extend(&cue);
    let start = ids.len();
    ids.extend(&answer_ids);
    let answer_positions = (start..ids.len()).collect();
    ids.extend(&period);
    if !subs.is_empty() {
        ids.extend(&label);
        ids.extend(&subs);
    }
    ids.push(SEP);
    Ok(Rendered { ids, answer_positions, truncated })
}

/// A masked sequence with the original ids at the masked positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedItem {
    pub ids: Vec<u32>,
    pub labels: Vec<(usize, u32)>,
}

/// Masks each unprotected non-special position with probability `p`,
/// resampling until at least one position is masked.
pub fn mlm_mask<R: Rng + ?Sized>(ids: &[u32], p: f64, rng: &mut R, protected: &[bool]) -> Result<MaskedItem> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("mask probability must lie in (0, 1), got {p}")));
    }
    let maskable: Vec<usize> = (0..ids.len())
        .filter(|&i| ids[i] as usize >= SPECIALS.len() && !protected.get(i).copied().unwrap_or(false))
        .collect();
    if maskable.is_empty() {
        return Err(Error::Input("no maskable positions".into()));
    }
    loop {
        let chosen: Vec<usize> = maskable.iter().copied().filter(|_| rng.random_bool(p)).collect();
        if chosen.is_empty() {
            continue;
        }
        let mut masked = ids.to_vec();
        let labels = chosen
            .into_iter()
            .map(|i| {
                masked[i] = MASK;
                (i, ids[i])
            })
            .collect();
        return Ok(MaskedItem { ids: masked, labels });
    }
}

/// Masks exactly the answer slot.
pub fn downstream_mask(rendered: &Rendered) -> MaskedItem {
    let mut ids = rendered.ids.clone();
    let labels = rendered
        .answer_positions
        .iter()
        .map(|&i| {
            let orig = ids[i];
            ids[i] = MASK;
            (i, orig)
        })
        .collect();
    MaskedItem { ids, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tok() -> Tokenizer {
        Tokenizer::build(["what is it", "a red ball bounces", "ice cream"], 64).unwrap()
    }

    #[test]
    fn templates_render_verbatim() {
        let q = "what is it";
        assert_eq!(Template::Labeled.render_text(q, "[MASK]", None), "[CLS] Question: what is it? Answer: [MASK]. [SEP]");
        assert_eq!(Template::Bare.render_text(q, "[MASK]", None), "[CLS] what is it? [MASK]. [SEP]");
        assert_eq!(
            Template::Instruction.render_text("What is it?", "[MASK]", None),
            "[CLS] Answer the question: what is it? [MASK]. [SEP]"
        );
        assert_eq!(Template::AnswerCue.render_text(q, "[MASK]", None), "[CLS] what is it? Answer: [MASK]. [SEP]");
        assert_eq!(
            Template::Labeled.render_text(q, "<Answer>", Some("a red ball")),
            "[CLS] Question: what is it? Answer: <Answer>. Subtitles: a red ball [SEP]"
        );
        assert_eq!(
            Template::Bare.render_text(q, "[MASK]", Some("a red ball")),
            "[CLS] what is it? [MASK]. a red ball [SEP]"
        );
    }

    #[test]
    fn token_rendering_agrees_with_text() {
        let t = tok();
        for template in Template::ALL {
            for subs in [None, Some("a red ball")] {
                let r = render_template(&t, template, "what is it", AnswerSlot::Mask, subs, 64).unwrap();
                assert_eq!(r.ids, t.encode(&template.render_text("what is it", "[MASK]", subs)));
                assert_eq!(r.answer_positions.len(), 1);
                assert_eq!(r.ids[r.answer_positions[0]], MASK);
            }
        }
    }

    #[test]
    fn truncation_drops_subtitles_before_question() {
        let t = tok();
        let full = render_template(&t, Template::Labeled, "what is it", AnswerSlot::Mask, Some("a red ball bounces"), 64).unwrap();
        let r = render_template(&t, Template::Labeled, "what is it", AnswerSlot::Mask, Some("a red ball bounces"), full.ids.len() - 2).unwrap();
        assert!(r.truncated);
        assert_eq!(r.ids.len(), full.ids.len() - 2);
        assert_eq!(t.decode(&r.ids), "[CLS] question: what is it? answer: [MASK]. subtitles: a red [SEP]");
        let no_subs = render_template(&t, Template::Labeled, "what is it", AnswerSlot::Mask, None, 64).unwrap();
        let r = render_template(&t, Template::Labeled, "what is it", AnswerSlot::Mask, Some("a red"), no_subs.ids.len() - 1).unwrap();
        assert_eq!(t.decode(&r.ids), "[CLS] question: what is? answer: [MASK]. [SEP]");
        assert!(matches!(
            render_template(&t, Template::Labeled, "what is it", AnswerSlot::Mask, None, 5),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn decode_round_trip_and_specials_order() {
        let t = tok();
        assert_eq!(&t.tokens()[..5], &SPECIALS.map(String::from));
        let text = "a red ball, what is it?";
        assert_eq!(t.decode(&t.encode(text)), text);
        assert_eq!(t.encode("zebra"), vec![UNK]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        t.save(&path).unwrap();
        assert_eq!(Tokenizer::load(&path).unwrap(), t);
        assert!(Tokenizer::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn mlm_mask_limits_and_determinism() {
        let ids = [CLS, 10, 11, 12, SEP];
        let m = mlm_mask(&ids, 0.999_999, &mut ChaCha8Rng::seed_from_u64(1), &[]).unwrap();
        assert_eq!(m.ids, vec![CLS, MASK, MASK, MASK, SEP]);
        assert_eq!(m.labels, vec![(1, 10), (2, 11), (3, 12)]);
        let a = mlm_mask(&ids, 0.3, &mut ChaCha8Rng::seed_from_u64(7), &[]).unwrap();
        let b = mlm_mask(&ids, 0.3, &mut ChaCha8Rng::seed_from_u64(7), &[]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            mlm_mask(&ids, 0.5, &mut ChaCha8Rng::seed_from_u64(1), &[true; 5]),
            Err(Error::Input(_))
        ));
        assert!(matches!(mlm_mask(&ids, 1.0, &mut ChaCha8Rng::seed_from_u64(1), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn downstream_mask_hides_only_the_answer() {
        let t = tok();
        let answer = t.encode("ice cream");
        let r = render_template(&t, Template::Labeled, "what is it", AnswerSlot::Tokens(&answer), None, 64).unwrap();
        let m = downstream_mask(&r);
        assert_eq!(m.labels.len(), 2);
        for (i, (&a, &b)) in r.ids.iter().zip(&m.ids).enumerate() {
            if r.answer_positions.contains(&i) {
                assert_eq!(b, MASK);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    proptest! {
        #[test]
        fn specials_and_protected_positions_never_masked(
            ids in prop::collection::vec(0u32..40, 1..30),
            protect in prop::collection::vec(any::<bool>(), 30),
            p in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match mlm_mask(&ids, p, &mut rng, &protect) {
                Ok(m) => {
                    prop_assert!(!m.labels.is_empty());
                    for (i, (&a, &b)) in ids.iter().zip(&m.ids).enumerate() {
                        if a < 5 || protect[i] {
                            prop_assert_eq!(a, b);
                        }
                        if a != b {
                            prop_assert!(m.labels.contains(&(i, a)));
                        }
                    }
                }
                Err(_) => prop_assert!(ids.iter().enumerate().all(|(i, &a)| a < 5 || protect[i])),
            }
        }

        #[test]
        fn truncation_keeps_structure(
            q in "[a-z]{1,6}( [a-z]{1,6}){0,8}",
            s in "[a-z]{1,6}( [a-z]{1,6}){0,12}",
            max_len in 12usize..40,
        ) {
            let t = Tokenizer::build([q.as_str(), s.as_str()], 200).unwrap();
            let r = render_template(&t, Template::Labeled, &q, AnswerSlot::Mask, Some(&s), max_len).unwrap();
            prop_assert!(r.ids.len() <= max_len);
            prop_assert_eq!(r.ids[0], CLS);
            prop_assert_eq!(*r.ids.last().unwrap(), SEP);
            prop_assert_eq!(r.ids.iter().filter(|&&i| i == MASK).count(), 1);
            let full = render_template(&t, Template::Labeled, &q, AnswerSlot::Mask, None, 1000).unwrap();
            // Question tokens survive whenever the subtitle-free rendering fits.
            if full.ids.len() <= max_len {
                prop_assert_eq!(&r.ids[..full.ids.len() - 1], &full.ids[..full.ids.len() - 1]);
            }
        }
    }
}
