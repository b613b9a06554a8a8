//! Precomputed frame features: the `VFF1` file format, frame sampling and the
//! projection into the model width.
//!
//! Layout (little endian): `b"VFF1"`, `u32` frame count, `u32` feature width,
//! `u32` float width in bytes (4 or 8), then `frames × width` floats stored
//! frame by frame.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const MAGIC: &[u8; 4] = b"VFF1";
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FloatWidth {
    F32 = 4,
    F64 = 8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub frames: usize,
    pub dim: usize,
    pub width: FloatWidth,
    /// `frames × dim`, frame-major.
    pub data: Vec<f64>,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(bytes.len() as u64, format!("truncated header: expected {HEADER_LEN} bytes")))
}

impl FrameFeatures {
    pub fn new(frames: usize, dim: usize, width: FloatWidth, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 || data.len() != frames * dim {
            return Err(Error::shape("frame features", &[frames, dim], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite frame feature".into()));
        }
        Ok(FrameFeatures { frames, dim, width, data })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(Error::format(0, "bad magic, expected VFF1"));
        }
        let frames = read_u32(bytes, 4)? as usize;
        let dim = read_u32(bytes, 8)? as usize;
        let width = match read_u32(bytes, 12)? {
            4 => FloatWidth::F32,
            8 => FloatWidth::F64,
            w => return Err(Error::format(12, format!("unsupported float width {w}"))),
        };
        if frames == 0 {
            return Err(Error::format(4, "zero frames"));
        }
        if dim == 0 {
            return Err(Error::format(8, "zero feature width"));
        }
        let w = width as usize;
        let expected = frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(w))
            .ok_or_else(|| Error::format(4, "payload size overflows"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::format(
                bytes.len() as u64,
                format!("payload holds {} bytes, header implies {expected}", payload.len()),
            ));
        }
        let mut data = Vec::with_capacity(frames * dim);
        for (i, chunk) in payload.chunks_exact(w).enumerate() {
            let v = match width {
                FloatWidth::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
                FloatWidth::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
            };
            if !v.is_finite() {
                return Err(Error::format((HEADER_LEN + i * w) as u64, "non-finite value"));
            }
            data.push(v);
        }
        Ok(FrameFeatures { frames, dim, width, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let w = self.width as usize;
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * w);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        for &v in &self.data {
            match self.width {
                FloatWidth::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                FloatWidth::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Indices `⌊i·T_raw/T⌋` when there are enough frames, otherwise all frames.
    pub fn sample_indices(frames: usize, target: usize) -> Vec<usize> {
        if frames >= target {
            (0..target).map(|i| i * frames / target).collect()
        } else {
            (0..frames).collect()
        }
    }

    /// `[F, T]` features with zero columns (validity `false`) padding short videos.
    pub fn sample(&self, target: usize) -> Result<(Tensor, Vec<bool>)> {
        if target == 0 {
            return Err(Error::Config("frame count must be positive".into()));
        }
        let picked = Self::sample_indices(self.frames, target);
        let mut data = vec![0.0; self.dim * target];
        for (col, &frame) in picked.iter().enumerate() {
            for f in 0..self.dim {
                data[f * target + col] = self.data[frame * self.dim + f];
            }
        }
        let mut valid = vec![false; target];
        valid[..picked.len()].fill(true);
        Ok((Tensor::new(&[self.dim, target], data)?, valid))
    }
}

pub fn load_and_sample(path: &Path, target: usize) -> Result<(Tensor, Vec<bool>)> {
    FrameFeatures::read(path)?.sample(target)
}

/// Bias-free linear map from feature width `F` to model width `D`.
#[derive(Clone, Debug)]
pub struct FrameProjector {
    pub weight: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FrameProjector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_dim: usize, out_dim: usize, trainable: bool, rng: &mut R) -> Self {
        let group = if trainable { Group::Rest } else { Group::Frozen };
        let weight = store.add(
            "projector.weight",
            group,
            Tensor::randn(&[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt(), rng),
        );
        FrameProjector { weight, in_dim, out_dim }
    }

    pub fn project(&self, cx: &mut Ctx, y: Var) -> Result<Var> {
        let w = cx.param(self.weight)?;
        cx.tape.matmul(w, y)
    }
}

/// Class signal added to synthetic features: every coordinate `f` with
/// `f % classes == class` is shifted by `offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedSignal {
    pub class: usize,
    pub classes: usize,
    pub offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub frames: usize,
    pub dim: usize,
    pub width: FloatWidth,
    pub signal: Option<PlantedSignal>,
}

/// Standard normal features plus the optional planted signal.
pub fn synth_features(spec: &SynthSpec, seed: u64) -> Result<FrameFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..spec.frames * spec.dim).map(|_| rng.sample(StandardNormal)).collect();
    if let Some(s) = spec.signal {
        if s.classes == 0 || s.class >= s.classes {
            return Err(Error::Config(format!("class {} outside 0..{}", s.class, s.classes)));
        }
        for (i, v) in data.iter_mut().enumerate() {
            if (i % spec.dim) % s.classes == s.class {
                *v += s.offset;
            }
        }
    }
    if spec.width == FloatWidth::F32 {
        for v in &mut data {
            *v = *v as f32 as f64;
        }
    }
    FrameFeatures::new(spec.frames, spec.dim, spec.width, data)
}
