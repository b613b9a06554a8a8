//! Dataset manifests and the synthetic planted-signal corpus.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{synth_features, FloatWidth, PlantedSignal, SynthSpec};

/// One JSON-lines manifest record. `caption` is used by pretraining only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    pub feature_path: PathBuf,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtitles: Option<String>,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// Reads a manifest, resolving relative feature paths against its directory.
/// Every referenced feature file must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestItem>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut item: ManifestItem = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if item.feature_path.is_relative() {
            item.feature_path = base.join(&item.feature_path);
        }
        items.push(item);
    }
    let missing: Vec<String> = items
        .iter()
        .filter(|i| !i.feature_path.is_file())
        .map(|i| i.feature_path.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Manifest { missing });
    }
    Ok(items)
}

pub fn write_manifest(path: &Path, items: &[ManifestItem]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn split<'a>(items: &'a [ManifestItem], name: &str) -> Vec<&'a ManifestItem> {
    items.iter().filter(|i| i.split == name).collect()
}

const OBJECTS: [&str; 16] = [
    "dog", "cat", "car", "ball", "tree", "bird", "boat", "fish", "horse", "train", "guitar", "kite", "cake", "bike", "lamp", "chair",
];
const QUESTIONS: [&str; 4] = ["what is in the video", "what does the video show", "what can you see", "what object appears"];
const CAPTIONS: [&str; 3] = ["a video showing a {}", "the {} is on screen", "a short clip of a {} outdoors"];

/// Synthetic video QA corpus: every item's frames carry the planted signal
/// of its class, and its answer is the class's object word.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub classes: usize,
    pub pretrain: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Nominal frame count; each video has between half and twice as many.
    pub frames: usize,
    pub feature_dim: usize,
    pub offset: f64,
    pub seed: u64,
}

impl Default for SynthCorpus {
    fn default() -> Self {
        SynthCorpus {
            classes: 8,
            pretrain: 128,
            train: 64,
            val: 32,
            test: 64,
            frames: 10,
            feature_dim: 768,
            offset: 1.0,
            seed: 0,
        }
    }
}

impl SynthCorpus {
    pub fn answers(&self) -> &'static [&'static str] {
        &OBJECTS[..self.classes]
    }

    /// Writes `features/*.vff` and `manifest.jsonl` under `dir`.
    pub fn generate(&self, dir: &Path) -> Result<Vec<ManifestItem>> {
        if self.classes == 0 || self.classes > OBJECTS.len() {
            return Err(Error::Config(format!("classes must be in 1..={}", OBJECTS.len())));
        }
        let feat_dir = dir.join("features");
        std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut items = Vec::new();
        for (split, n) in [("pretrain", self.pretrain), ("train", self.train), ("val", self.val), ("test", self.test)] {
            // Balanced classes in shuffled order.
            let mut classes: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
            classes.shuffle(&mut rng);
            for (i, class) in classes.into_iter().enumerate() {
                let id = format!("{split}-{i:04}");
                let frames = rng.random_range(self.frames.div_ceil(2).max(1)..=2 * self.frames);
                let spec = SynthSpec {
                    frames,
                    dim: self.feature_dim,
                    width: FloatWidth::F32,
                    signal: Some(PlantedSignal { class, classes: self.classes, offset: self.offset }),
                };
                let rel = PathBuf::from("features").join(format!("{id}.vff"));
                synth_features(&spec, rng.random())?.write(&dir.join(&rel))?;
                let object = OBJECTS[class];
                let caption = CAPTIONS[rng.random_range(0..CAPTIONS.len())].replace("{}", object);
                items.push(ManifestItem {
                    id,
                    feature_path: rel,
                    question: QUESTIONS[rng.random_range(0..QUESTIONS.len())].to_string(),
                    answer: object.to_string(),
                    subtitles: None,
                    split: split.to_string(),
                    caption: Some(caption),
                });
            }
        }
        write_manifest(&dir.join("manifest.jsonl"), &items)?;
        Ok(items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = SynthCorpus { pretrain: 4, train: 8, val: 0, test: 4, feature_dim: 16, ..Default::default() };
        let written = corpus.generate(dir.path()).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.len(), 16);
        assert_eq!(split(&loaded, "train").len(), 8);
        assert_eq!(loaded[0].feature_path, dir.path().join(&written[0].feature_path));

        let again = tempfile::tempdir().unwrap();
        corpus.generate(again.path()).unwrap();
        for item in &written {
            let a = std::fs::read(dir.path().join(&item.feature_path)).unwrap();
            let b = std::fs::read(again.path().join(&item.feature_path)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_features_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = SynthCorpus { pretrain: 0, train: 3, val: 0, test: 0, feature_dim: 4, ..Default::default() };
        let items = corpus.generate(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(&items[1].feature_path)).unwrap();
        match load_manifest(&dir.path().join("manifest.jsonl")) {
            Err(Error::Manifest { missing }) => {
                assert_eq!(missing.len(), 1);
                assert!(missing[0].ends_with("train-0001.vff"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{\"id\": 1}\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Input(_))));
    }
}
