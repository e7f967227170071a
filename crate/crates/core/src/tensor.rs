//! Dense row-major f64 tensors plus the domain containers built on them.
//!
//! All reductions run in fixed index-ascending order so results are
//! bit-reproducible regardless of thread count.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"FGT1";

/// Dense rank-N tensor of finite f64 values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("invalid extents {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} != product of {:?}",
                data.len(),
                shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite tensor value".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn random_normal(shape: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Elementwise map; errors if the result is non-finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Per-frame affine rescale to [0, 1]; constant frames map to zeros.
    ///
    /// Frame layout: rank 1 is a single frame; rank 2 treats the first axis
    /// as frames of flat values; rank >= 3 treats the trailing two axes as
    /// the frame content and every leading index combination as one frame.
    pub fn minmax_normalize(&self) -> Tensor {
        let frame_len = match self.rank() {
            1 => self.data.len(),
            2 => self.shape[1],
            _ => self.shape[self.rank() - 2] * self.shape[self.rank() - 1],
        };
        let mut out = self.data.clone();
        for frame in out.chunks_mut(frame_len) {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in frame.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi > lo {
                let inv = 1.0 / (hi - lo);
                for v in frame.iter_mut() {
                    *v = (*v - lo) * inv;
                }
            } else {
                for v in frame.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Binary serialization: magic "FGT1", u32 rank, rank x u32 extents,
    /// payload little-endian f64 row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.rank() + 8 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &e in &self.shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Tensor::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if rank == 0 {
            return Err(Error::Format("empty shape".into()));
        }
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::Format("truncated extents".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = 8 + 4 * i;
            let e = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            if e == 0 {
                return Err(Error::Format("zero extent".into()));
            }
            shape.push(e);
        }
        let n: usize = shape.iter().product();
        if bytes.len() != header + 8 * n {
            return Err(Error::Format(format!(
                "payload length {} != expected {}",
                bytes.len() - header,
                8 * n
            )));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let off = header + 8 * i;
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format("non-finite payload value".into()));
            }
            data.push(v);
        }
        Ok(Tensor { shape, data })
    }

    /// CSV export for [F, H, W] tensors: header `frame,y,x,value`.
    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        if self.rank() != 3 {
            return Err(Error::Shape(format!(
                "csv export expects rank 3, got {:?}",
                self.shape
            )));
        }
        let (f, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = String::from("frame,y,x,value\n");
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let v = self.data[(fi * h + y) * w + x];
                    out.push_str(&format!("{fi},{y},{x},{v}\n"));
                }
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Cosine similarity of two equal-length vectors, in [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {}", a.len(), b.len())));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Latent video: [F', H', W', C] tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tensor: Tensor,
}

impl LatentVideo {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::Shape(format!(
                "latent video expects rank 4, got {:?}",
                tensor.shape()
            )));
        }
        let s = tensor.shape();
        Ok(LatentVideo {
            frames: s[0],
            height: s[1],
            width: s[2],
            channels: s[3],
            tensor,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        LatentVideo::new(Tensor::zeros(vec![frames, height, width, channels])?)
    }

    pub fn random_normal(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        LatentVideo::new(Tensor::random_normal(
            vec![frames, height, width, channels],
            rng,
        )?)
    }

    pub fn cell(&self, f: usize, y: usize, x: usize) -> &[f64] {
        let c = self.channels;
        let off = ((f * self.height + y) * self.width + x) * c;
        &self.tensor.data()[off..off + c]
    }

    pub fn cell_mut(&mut self, f: usize, y: usize, x: usize) -> &mut [f64] {
        let c = self.channels;
        let off = ((f * self.height + y) * self.width + x) * c;
        &mut self.tensor.data_mut()[off..off + c]
    }

    pub fn same_shape(&self, other: &LatentVideo) -> bool {
        self.tensor.shape() == other.tensor.shape()
    }
}

/// Modality of a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Anchor,
}

/// Ordered list of D-dimensional embedding vectors with a modality tag.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub modality: Modality,
    pub dim: usize,
    pub tokens: Vec<Vec<f64>>,
}

impl TokenSequence {
    pub fn new(modality: Modality, dim: usize, tokens: Vec<Vec<f64>>) -> Result<Self> {
        if tokens.is_empty() && modality != Modality::Anchor {
            return Err(Error::Shape("empty token list".into()));
        }
        if tokens.iter().any(|t| t.len() != dim) {
            return Err(Error::Shape("token length != dim".into()));
        }
        Ok(TokenSequence {
            modality,
            dim,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Normalization state of a similarity map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormState {
    Raw,
    PerFrame,
}

/// Dense [K, F', H', W'] map of keyword-visual similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub tensor: Tensor,
    pub norm: NormState,
}

impl SimilarityMap {
    pub fn new(tensor: Tensor, norm: NormState) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::Shape(format!(
                "similarity map expects rank 4 [K,F,H,W], got {:?}",
                tensor.shape()
            )));
        }
        Ok(SimilarityMap { tensor, norm })
    }

    pub fn keywords(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[1]
    }

    /// Per-(keyword, frame) min-max normalized copy.
    pub fn normalized(&self) -> SimilarityMap {
        SimilarityMap {
            tensor: self.tensor.minmax_normalize(),
            norm: NormState::PerFrame,
        }
    }

    /// One [H', W'] frame slice for keyword k, frame f.
    pub fn frame(&self, k: usize, f: usize) -> Tensor {
        let s = self.tensor.shape();
        let (h, w) = (s[2], s[3]);
        let off = (k * s[1] + f) * h * w;
        Tensor::new(
            vec![h, w],
            self.tensor.data()[off..off + h * w].to_vec(),
        )
        .expect("slice of valid map")
    }
}
