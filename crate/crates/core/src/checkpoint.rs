//! Sectioned binary checkpoint container.
//!
//! ```text
//! b"MMCK"  u32 version  u32 section_count
//! section*: [u8; 4] tag  u64 payload_len  payload
//! ```
//!
//! `CONF` holds JSON metadata. Tensor sections (`FROZ`, `ADPT`, `PRMT`,
//! `MAPR`, `PROJ`) hold a `u32` entry count followed by entries of
//! `u16 name_len, name, u8 ndim, u32 dims…, f64 data…`. `OPTM` holds the
//! optimizer step count and per-parameter moments. Prompts are always
//! written in folded form. A prompts-only delta holds just `CONF` and `PRMT`
//! and names the full checkpoint it applies to.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, Moments};
use crate::params::{Group, ParamId};
use crate::prompts::{PromptMode, TextPromptSet};
use crate::tensor::Tensor;
use crate::text::Tokenizer;
use crate::train::group_hash;

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    kind: Kind,
    model: ModelConfig,
    /// Vocabulary, absent from deltas.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<String>>,
    frozen_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Kind {
    Full,
    PromptsDelta,
}

/// Which section a parameter belongs to.
fn section_of(model: &Model, name: &str, group: Group) -> &'static [u8; 4] {
    match group {
        Group::Frozen if name.starts_with("projector.") => b"PROJ",
        Group::Frozen => b"FROZ",
        Group::Prompt => b"PRMT",
        Group::Rest if name.starts_with("projector.") => b"PROJ",
        Group::Rest if name.starts_with("mapper.") => b"MAPR",
        Group::Rest => {
            debug_assert!(model.config.adapters && name.contains("adapter"));
            b"ADPT"
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn section(&mut self, tag: &[u8; 4], payload: &[u8]) {
        self.0.extend_from_slice(tag);
        self.0.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.0.extend_from_slice(payload);
    }
}

fn encode_tensors(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Bounds-checked reader reporting absolute file offsets.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        Cursor { bytes, pos: 0, base }
    }

    fn offset(&self) -> u64 {
        (self.base + self.pos) as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.offset(), format!("truncated {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::format(self.offset(), format!("{what} too large")))?;
        let at = self.offset();
        let raw = self.take(len, what)?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(at + 8 * i as u64, format!("non-finite value in {what}")));
        }
        Ok(vals)
    }
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_tensors(payload: &[u8], base: usize) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor::new(payload, base);
    let n = c.u32("entry count")?;
    let mut out = Vec::new();
    for _ in 0..n {
        let name_len = c.u16("name length")? as usize;
        let at = c.offset();
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::format(at, "name is not UTF-8"))?
            .to_string();
        let ndim = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32("extent")? as usize);
        }
        let at = c.offset();
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = count.filter(|&n| n > 0 && ndim > 0).ok_or_else(|| Error::format(at, format!("bad shape {shape:?}")))?;
        let data = c.f64s(count, "tensor data")?;
        out.push((name, Tensor::new(&shape, data)?));
    }
    if !c.done() {
        return Err(Error::format(c.offset(), "trailing bytes in section"));
    }
    Ok(out)
}

fn encode_adam(model: &Model, adam: &Adam) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&adam.steps.to_le_bytes());
    // Moments of parameters removed by folding are dropped with them.
    let live: Vec<(&ParamId, &Moments)> = adam.moments.iter().filter(|(id, _)| model.store.get(**id).is_ok()).collect();
    out.extend_from_slice(&(live.len() as u32).to_le_bytes());
    for (id, m) in live {
        let name = &model.store.get(*id).expect("live").name;
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.m.len() as u32).to_le_bytes());
        for v in m.m.iter().chain(&m.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_adam(model: &Model, payload: &[u8], base: usize) -> Result<Adam> {
    let mut c = Cursor::new(payload, base);
    let steps = c.u64("optimizer steps")?;
    let n = c.u32("moment count")?;
    let mut moments = BTreeMap::new();
    for _ in 0..n {
        let len = c.u16("name length")? as usize;
        let at = c.offset();
        let name = std::str::from_utf8(c.take(len, "name")?).map_err(|_| Error::format(at, "name is not UTF-8"))?;
        let id = model.store.find(name).ok_or_else(|| Error::format(at, format!("moments for unknown parameter {name}")))?;
        let k = c.u32("moment length")? as usize;
        let m = c.f64s(k, "first moment")?;
        let v = c.f64s(k, "second moment")?;
        moments.insert(id, Moments { m, v });
    }
    if !c.done() {
        return Err(Error::format(c.offset(), "trailing bytes in optimizer section"));
    }
    Ok(Adam { steps, moments })
}

/// Copy of the model with reparametrized prompts folded.
fn folded(model: &Model) -> Result<Model> {
    let mut m = model.clone();
    m.fold_prompts()?;
    Ok(m)
}

fn meta_bytes(meta: &Meta) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(meta)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a full checkpoint; `adam` adds the optimizer section.
pub fn save_checkpoint(path: &Path, model: &Model, tok: &Tokenizer, adam: Option<&Adam>) -> Result<()> {
    let m = folded(model)?;
    let meta = Meta {
        kind: Kind::Full,
        model: stored_config(&m),
        tokens: Some(tok.tokens().to_vec()),
        frozen_sha256: group_hash(&m.store, Group::Frozen),
        base: None,
    };
    let mut sections: BTreeMap<&[u8; 4], Vec<(&str, &Tensor)>> = BTreeMap::new();
    for (_, p) in m.store.iter() {
        sections.entry(section_of(&m, &p.name, p.group)).or_default().push((&p.name, &p.value));
    }
    let order: [&[u8; 4]; 5] = [b"FROZ", b"ADPT", b"PRMT", b"MAPR", b"PROJ"];
    let present: Vec<&[u8; 4]> = order.into_iter().filter(|t| sections.contains_key(t)).collect();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.0.extend_from_slice(&((1 + present.len() + adam.is_some() as usize) as u32).to_le_bytes());
    w.section(b"CONF", &meta_bytes(&meta)?);
    for tag in present {
        w.section(tag, &encode_tensors(&sections[tag]));
    }
    if let Some(adam) = adam {
        w.section(b"OPTM", &encode_adam(&m, adam));
    }
    write_file(path, &w.0)
}

/// Writes only the prompts, referencing `base` for everything else.
pub fn save_prompts_delta(path: &Path, model: &Model, base: &Path) -> Result<()> {
    let m = folded(model)?;
    let meta = Meta {
        kind: Kind::PromptsDelta,
        model: stored_config(&m),
        tokens: None,
        frozen_sha256: group_hash(&m.store, Group::Frozen),
        base: Some(std::path::absolute(base).map_err(|e| Error::io(base, e))?),
    };
    let prompts: Vec<(&str, &Tensor)> = m
        .store
        .iter()
        .filter(|(_, p)| p.group == Group::Prompt)
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .collect();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.0.extend_from_slice(&2u32.to_le_bytes());
    w.section(b"CONF", &meta_bytes(&meta)?);
    w.section(b"PRMT", &encode_tensors(&prompts));
    write_file(path, &w.0)
}

/// The stored config always describes folded prompts.
fn stored_config(model: &Model) -> ModelConfig {
    ModelConfig { reparam: false, ..model.config.clone() }
}

pub struct Loaded {
    pub model: Model,
    pub tokenizer: Tokenizer,
    pub adam: Option<Adam>,
}

/// Sections by tag with the absolute offset of each payload.
/// Tag, absolute payload offset and payload of one section.
type Section<'a> = ([u8; 4], usize, &'a [u8]);

fn parse_container(bytes: &[u8]) -> Result<Vec<Section<'_>>> {
    let mut c = Cursor::new(bytes, 0);
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected MMCK"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = c.u32("section count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let tag: [u8; 4] = c.take(4, "section tag")?.try_into().expect("4 bytes");
        let len_at = c.offset();
        let len = c.u64("section length")?;
        let len = usize::try_from(len).map_err(|_| Error::format(len_at, "section length overflows"))?;
        if len > bytes.len() - c.pos {
            return Err(Error::format(len_at, format!("section {} claims {len} bytes, {} remain", String::from_utf8_lossy(&tag), bytes.len() - c.pos)));
        }
        let start = c.pos;
        out.push((tag, start, c.take(len, "section")?));
    }
    if !c.done() {
        return Err(Error::format(c.offset(), "trailing bytes after last section"));
    }
    Ok(out)
}

/// Loads a full checkpoint or a prompts-only delta (resolving its base).
pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let sections = parse_container(&bytes)?;
    let Some((_, conf_at, conf)) = sections.iter().find(|(t, _, _)| t == b"CONF") else {
        return Err(Error::format(12, "missing CONF section"));
    };
    let meta: Meta = serde_json::from_slice(conf).map_err(|e| Error::format(*conf_at as u64, format!("bad CONF: {e}")))?;

    let mut loaded = match (meta.kind, &meta.base) {
        (Kind::Full, _) => {
            let tokens = meta.tokens.clone().ok_or_else(|| Error::format(*conf_at as u64, "full checkpoint without vocabulary"))?;
            let mut model = Model::new(meta.model.clone(), 0)?;
            mark_folded(&mut model)?;
            Loaded { model, tokenizer: Tokenizer::from_tokens(tokens)?, adam: None }
        }
        (Kind::PromptsDelta, Some(base)) => load_checkpoint(base)?,
        (Kind::PromptsDelta, None) => return Err(Error::format(*conf_at as u64, "delta without base path")),
    };
    if loaded.model.config != meta.model {
        return Err(Error::State("delta was written for a different model configuration".into()));
    }

    let mut seen = std::collections::HashSet::new();
    for (tag, at, payload) in &sections {
        match tag {
            b"CONF" => {}
            b"OPTM" => loaded.adam = Some(decode_adam(&loaded.model, payload, *at)?),
            b"FROZ" | b"ADPT" | b"PRMT" | b"MAPR" | b"PROJ" => {
                for (name, value) in decode_tensors(payload, *at)? {
                    let id = loaded
                        .model
                        .store
                        .find(&name)
                        .ok_or_else(|| Error::format(*at as u64, format!("unknown parameter {name}")))?;
                    loaded.model.store.set(id, value)?;
                    seen.insert(id);
                }
            }
            other => return Err(Error::format(*at as u64 - 12, format!("unknown section {}", String::from_utf8_lossy(other)))),
        }
    }
    let expected: Vec<ParamId> = match meta.kind {
        Kind::Full => loaded.model.store.iter().map(|(id, _)| id).collect(),
        Kind::PromptsDelta => loaded.model.store.ids_in(Group::Prompt),
    };
    if let Some(missing) = expected.iter().find(|id| !seen.contains(id)) {
        let name = &loaded.model.store.get(*missing)?.name;
        return Err(Error::format(bytes.len() as u64, format!("checkpoint lacks parameter {name}")));
    }
    if group_hash(&loaded.model.store, Group::Frozen) != meta.frozen_sha256 {
        return Err(Error::State("frozen weights do not match the recorded hash".into()));
    }
    Ok(loaded)
}

fn mark_folded(model: &mut Model) -> Result<()> {
    if model.prompts.mode() == PromptMode::Direct {
        let ids = model.prompts.param_ids();
        let table = model.store.value(ids[0]).clone();
        model.store.discard(ids[0]);
        model.prompts = TextPromptSet::from_folded(&mut model.store, model.config.layers, model.config.dim, table)?;
    }
    Ok(())
}

/// Section tags and payload sizes, for inspection.
pub fn inspect(path: &Path) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let sections = parse_container(&bytes)?;
    let mut out = serde_json::Map::new();
    out.insert("bytes".into(), bytes.len().into());
    let mut list = Vec::new();
    for (tag, at, payload) in &sections {
        let mut s = serde_json::Map::new();
        s.insert("tag".into(), String::from_utf8_lossy(tag).into_owned().into());
        s.insert("bytes".into(), payload.len().into());
        match tag {
            b"CONF" => {
                let meta: Meta = serde_json::from_slice(payload).map_err(|e| Error::format(*at as u64, format!("bad CONF: {e}")))?;
                out.insert("kind".into(), serde_json::to_value(meta.kind)?);
                out.insert("model".into(), serde_json::to_value(&meta.model)?);
                out.insert("frozen_sha256".into(), meta.frozen_sha256.into());
                if let Some(b) = meta.base {
                    out.insert("base".into(), b.display().to_string().into());
                }
            }
            b"OPTM" => {}
            _ => {
                let entries = decode_tensors(payload, *at)?;
                let count: usize = entries.iter().map(|(_, t)| t.len()).sum();
                s.insert("tensors".into(), entries.len().into());
                s.insert("values".into(), count.into());
            }
        }
        list.push(serde_json::Value::Object(s));
    }
    out.insert("sections".into(), list.into());
    Ok(serde_json::Value::Object(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ItemInput;
    use crate::prompts::prompt_param_count;
    use crate::text::{CLS, MASK, SEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            dim: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            max_len: 20,
            adapter_dim: 2,
            text_prompts: 3,
            prompt_dim: 4,
            mapper_heads: 2,
            visual_prompts: 2,
            frame_dim: 6,
            frames: 3,
            ..ModelConfig::desk()
        }
    }

    fn tok() -> Tokenizer {
        let mut t: Vec<String> = crate::text::SPECIALS.iter().map(|s| s.to_string()).collect();
        t.extend(["a", "b", "c"].map(String::from));
        Tokenizer::from_tokens(t).unwrap()
    }

    fn item() -> ItemInput {
        let frames = Tensor::randn(&[6, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        ItemInput { video: Some((frames, vec![true, true, false])), ids: vec![CLS, 5, MASK, SEP] }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(tiny(), 3).unwrap();
        let before = model.predict_logits(&item(), 2, None).unwrap();
        let mut adam = Adam::new();
        adam.steps = 7;
        adam.moments.insert(model.mapper.temporal, Moments { m: vec![0.5; 6], v: vec![0.25; 6] });
        // Reparametrization inputs disappear on folding, and so do their moments.
        assert_eq!(model.prompts.mode(), PromptMode::Reparam);
        adam.moments.insert(model.prompts.param_ids()[0], Moments { m: vec![1.0; 8], v: vec![1.0; 8] });
        save_checkpoint(&path, &model, &tok(), Some(&adam)).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.tokenizer, tok());
        let after = loaded.model.predict_logits(&item(), 2, None).unwrap();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
        let adam2 = loaded.adam.unwrap();
        assert_eq!(adam2.steps, 7);
        assert_eq!(adam2.moments[&loaded.model.mapper.temporal].v, vec![0.25; 6]);
        assert_eq!(adam2.moments.len(), 1);
        assert_eq!(loaded.model.prompts.mode(), PromptMode::Folded);

        let info = inspect(&path).unwrap();
        let tags: Vec<&str> = info["sections"].as_array().unwrap().iter().map(|s| s["tag"].as_str().unwrap()).collect();
        assert_eq!(tags, ["CONF", "FROZ", "ADPT", "PRMT", "MAPR", "PROJ", "OPTM"]);
    }

    #[test]
    fn prompt_payload_is_folded_count() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("base.ckpt");
        let mut model = Model::new(tiny(), 4).unwrap();
        save_checkpoint(&base, &model, &tok(), None).unwrap();
        let info = inspect(&base).unwrap();
        let prmt = info["sections"].as_array().unwrap().iter().find(|s| s["tag"] == "PRMT").unwrap().clone();
        let expected = prompt_param_count(2, 8, 3, 2);
        assert_eq!(prmt["values"].as_u64().unwrap() as usize, expected);

        let prompt_id = model.store.ids_in(Group::Prompt)[0];
        model.store.value_mut(prompt_id).data_mut()[0] += 1.0;
        let delta = dir.path().join("delta.ckpt");
        save_prompts_delta(&delta, &model, &base).unwrap();
        let size = std::fs::metadata(&delta).unwrap().len() as usize;
        let header = 12 + 2 * 12 + info["sections"][0]["bytes"].as_u64().unwrap() as usize + 512;
        assert!(size <= expected * 8 + header, "{size}");
        let loaded = load_checkpoint(&delta).unwrap();
        let a = model.predict_logits(&item(), 2, None).unwrap();
        let b = loaded.model.predict_logits(&item(), 2, None).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn tampering_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &Model::new(tiny(), 5).unwrap(), &tok(), None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let check = |b: Vec<u8>| {
            std::fs::write(&path, &b).unwrap();
            let r = load_checkpoint(&path);
            assert!(matches!(r, Err(Error::Format { .. })), "{:?}", r.err());
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        check(bad);
        let mut bad = bytes.clone();
        bad[4] = 9;
        check(bad);
        // First section length, just after the CONF tag.
        let mut bad = bytes.clone();
        bad[16..24].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
        check(bad);
        let mut bad = bytes.clone();
        let len = u64::from_le_bytes(bad[16..24].try_into().unwrap());
        bad[16..24].copy_from_slice(&(len + 3).to_le_bytes());
        check(bad);
        check(bytes[..bytes.len() - 5].to_vec());
    }
}
