//! Layer-wise semantic responsiveness: Moran's I and standard deviation of
//! normalized similarity maps, weak-layer identification, CSV exports.
//!
//! Moran's I uses a binary 8-connectivity weight matrix with no wraparound.
//! The default statistic omits the division by W = sum of weights; the
//! `normalize_by_w` flag gives the textbook form.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par::map_range;
use crate::tensor::{SimilarityMap, Tensor};

/// Per-layer responsiveness record.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub morans_i: f64,
    pub std: f64,
    pub weak: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoranOptions {
    /// Divide by W = total weight (textbook Moran's I) instead of the
    /// bare pair sum.
    pub normalize_by_w: bool,
}

impl Default for MoranOptions {
    fn default() -> Self {
        MoranOptions {
            normalize_by_w: false,
        }
    }
}

/// Moran's I of one [H', W'] frame under 8-connectivity.
/// Constant frames return 0 by convention.
pub fn morans_i_frame(frame: &Tensor, opts: MoranOptions) -> Result<f64> {
    if frame.rank() != 2 {
        return Err(Error::Shape(format!(
            "expected [H,W] frame, got {:?}",
            frame.shape()
        )));
    }
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let n = h * w;
    if n < 2 {
        return Err(Error::Shape("frame needs at least 2 cells".into()));
    }
    let data = frame.data();
    let mean = data.iter().sum::<f64>() / n as f64;
    let mut denom = 0.0;
    for &v in data {
        denom += (v - mean) * (v - mean);
    }
    if denom == 0.0 {
        return Ok(0.0);
    }
    let mut pair_sum = 0.0;
    let mut weight_count = 0u64;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let di = data[(y as usize) * w + x as usize] - mean;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let dj = data[(ny as usize) * w + nx as usize] - mean;
                    pair_sum += di * dj;
                    weight_count += 1;
                }
            }
        }
    }
    let mut i = n as f64 * pair_sum / denom;
    if opts.normalize_by_w {
        i /= weight_count as f64;
    }
    Ok(i)
}

/// Layer Moran's I: mean over the per-frame values for keyword k.
/// Frames evaluate in parallel; the average is a fixed-order reduction.
pub fn morans_i_layer(map: &SimilarityMap, k: usize, opts: MoranOptions) -> Result<f64> {
    let frames = map.frames();
    let per_frame: Vec<Result<f64>> =
        map_range(frames, |f| morans_i_frame(&map.frame(k, f), opts));
    let mut sum = 0.0;
    for r in per_frame {
        sum += r?;
    }
    Ok(sum / frames as f64)
}

/// Population standard deviation of one flat frame.
fn population_std(data: &[f64]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Layer std: mean over frames of the per-frame population std.
pub fn std_layer(map: &SimilarityMap, k: usize) -> Result<f64> {
    let frames = map.frames();
    let per_frame: Vec<f64> = map_range(frames, |f| population_std(map.frame(k, f).data()));
    Ok(per_frame.iter().sum::<f64>() / frames as f64)
}

/// Weak-layer selection rule.
#[derive(Debug, Clone, PartialEq)]
pub enum WeakRule {
    /// Bottom ceil(q*L) layers by Moran's I, ties broken by lower index.
    BottomFraction(f64),
    /// Explicit layer indices, returned verbatim.
    Explicit(Vec<usize>),
}

pub fn identify_weak_layers(profiles: &[LayerProfile], rule: &WeakRule) -> Result<BTreeSet<usize>> {
    if profiles.is_empty() {
        return Err(Error::Config("empty profile list".into()));
    }
    match rule {
        WeakRule::Explicit(list) => {
            let max_layer = profiles.iter().map(|p| p.layer).max().unwrap();
            for &l in list {
                if l > max_layer {
                    return Err(Error::Config(format!("explicit layer {l} out of range")));
                }
            }
            Ok(list.iter().copied().collect())
        }
        WeakRule::BottomFraction(q) => {
            if !(*q > 0.0 && *q < 1.0) {
                return Err(Error::Config(format!("fraction q={q} outside (0,1)")));
            }
            let count = ((q * profiles.len() as f64).ceil() as usize).max(1);
            let mut order: Vec<&LayerProfile> = profiles.iter().collect();
            order.sort_by(|a, b| {
                a.morans_i
                    .partial_cmp(&b.morans_i)
                    .unwrap()
                    .then(a.layer.cmp(&b.layer))
            });
            Ok(order.iter().take(count).map(|p| p.layer).collect())
        }
    }
}

/// Step-by-layer heatmap export: `step,layer,keyword,value` rows.
pub fn export_step_layer_heatmap(
    rows: &[(usize, usize, usize, f64)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = String::from("step,layer,keyword,value\n");
    for &(step, layer, keyword, value) in rows {
        out.push_str(&format!("{step},{layer},{keyword},{value}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Layer profile export: `layer,morans_i,std` rows.
pub fn export_layer_profiles(profiles: &[LayerProfile], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("layer,morans_i,std\n");
    for p in profiles {
        out.push_str(&format!("{},{},{}\n", p.layer, p.morans_i, p.std));
    }
    std::fs::write(path, out)?;
    Ok(())
}
