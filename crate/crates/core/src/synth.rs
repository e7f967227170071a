//! Deterministic synthetic world: latent videos with moving-block
//! semantics plus matching text/image token embeddings whose keyword to
//! region correspondence is known by construction.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{LatentVideo, Modality, Tensor, TokenSequence};

/// A rectangular block with a channel signature and per-frame motion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSpec {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
    /// Channel signature painted into the latent; length = channels.
    pub signature: Vec<f64>,
    /// Cells moved per frame step: (dy, dx).
    pub motion: (i64, i64),
    /// Bound blocks contribute one synthetic text token (the signature).
    #[serde(default)]
    pub bound: bool,
}

fn default_noise_sigma() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Background channel vector; length = channels.
    pub background: Vec<f64>,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    pub blocks: Vec<BlockSpec>,
}

impl SceneSpec {
    /// Top-left corner of block `b` at frame `f`, or an error if it
    /// leaves the grid.
    pub fn block_position(&self, b: usize, f: usize) -> Result<(usize, usize)> {
        let block = &self.blocks[b];
        let y = block.y as i64 + block.motion.0 * f as i64;
        let x = block.x as i64 + block.motion.1 * f as i64;
        if y < 0
            || x < 0
            || (y as usize) + block.h > self.height
            || (x as usize) + block.w > self.width
        {
            return Err(Error::Config(format!(
                "block {b} out of bounds at frame {f}"
            )));
        }
        Ok((y as usize, x as usize))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("scene extents must be >= 1".into()));
        }
        if self.background.len() != self.channels {
            return Err(Error::Config("background length != channels".into()));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.h == 0 || block.w == 0 {
                return Err(Error::Config(format!("block {b} has zero extent")));
            }
            if block.signature.len() != self.channels {
                return Err(Error::Config(format!(
                    "block {b} signature length != channels"
                )));
            }
            for f in 0..self.frames {
                self.block_position(b, f)?;
            }
        }
        // overlapping blocks with identical signatures are ambiguous
        for a in 0..self.blocks.len() {
            for b in a + 1..self.blocks.len() {
                if self.blocks[a].signature != self.blocks[b].signature {
                    continue;
                }
                for f in 0..self.frames {
                    let fa = self.block_cells(a, f)?;
                    let fb = self.block_cells(b, f)?;
                    if fa.intersection(&fb).next().is_some() {
                        return Err(Error::Config(format!(
                            "blocks {a} and {b} overlap with identical signatures at frame {f}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Cells covered by block `b` at frame `f`.
    pub fn block_cells(&self, b: usize, f: usize) -> Result<BTreeSet<(usize, usize)>> {
        let (y0, x0) = self.block_position(b, f)?;
        let block = &self.blocks[b];
        let mut cells = BTreeSet::new();
        for dy in 0..block.h {
            for dx in 0..block.w {
                cells.insert((y0 + dy, x0 + dx));
            }
        }
        Ok(cells)
    }

    /// Indices of bound blocks, ascending.
    pub fn bound_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.bound)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Fully rendered synthetic scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub latent: LatentVideo,
    pub z_ref: LatentVideo,
    /// One token per bound block: its channel signature.
    pub c_text: TokenSequence,
    /// One token per frame-0 cell: latent content plus seeded noise.
    pub c_img: TokenSequence,
    /// Frame-0 footprint of each bound block, aligned with c_text.
    pub true_regions: Vec<BTreeSet<(usize, usize)>>,
}

pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let (f, h, w, c) = (spec.frames, spec.height, spec.width, spec.channels);
    let mut data = Vec::with_capacity(f * h * w * c);
    for _ in 0..f * h * w {
        data.extend_from_slice(&spec.background);
    }
    let mut latent = LatentVideo::new(Tensor::new(vec![f, h, w, c], data)?)?;
    for (b, block) in spec.blocks.iter().enumerate() {
        for frame in 0..f {
            for &(y, x) in &spec.block_cells(b, frame)? {
                latent.cell_mut(frame, y, x).copy_from_slice(&block.signature);
            }
        }
    }

    let mut ref_data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            ref_data.extend_from_slice(latent.cell(0, y, x));
        }
    }
    let z_ref = LatentVideo::new(Tensor::new(vec![1, h, w, c], ref_data)?)?;

    let mut rng = Rng::new(seed);
    let mut img_tokens = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let cell = latent.cell(0, y, x);
            img_tokens.push(
                cell.iter()
                    .map(|&v| v + spec.noise_sigma * rng.normal())
                    .collect::<Vec<f64>>(),
            );
        }
    }
    let c_img = TokenSequence::new(Modality::Image, c, img_tokens)?;

    let bound = spec.bound_blocks();
    let text_tokens: Vec<Vec<f64>> = bound.iter().map(|&b| spec.blocks[b].signature.clone()).collect();
    if text_tokens.is_empty() {
        return Err(Error::Config("scene has no bound blocks".into()));
    }
    let c_text = TokenSequence::new(Modality::Text, c, text_tokens)?;
    let true_regions = bound
        .iter()
        .map(|&b| spec.block_cells(b, 0))
        .collect::<Result<Vec<_>>>()?;

    Ok(Scene {
        spec: spec.clone(),
        latent,
        z_ref,
        c_text,
        c_img,
        true_regions,
    })
}

/// Intersection-over-union of two cell sets; empty union counts as 1.
pub fn ground_truth_region_iou(
    predicted: &BTreeSet<(usize, usize)>,
    truth: &BTreeSet<(usize, usize)>,
) -> f64 {
    let union = predicted.union(truth).count();
    if union == 0 {
        return 1.0;
    }
    let inter = predicted.intersection(truth).count();
    inter as f64 / union as f64
}
