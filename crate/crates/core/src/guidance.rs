//! Fine-grained Semantic Guidance and the Attention Cache.
//!
//! FSG: keyword selection from text-image similarity, visual anchors as
//! similarity-weighted token sums, projection into the DiT space, additive
//! text-value fusion, and region-weighted latent injection. Attention
//! Cache: per-layer keyword-visual similarity maps, strong-layer
//! aggregation, thresholding, and weak-layer injection. Multi-keyword
//! overlaps sum in ascending keyword order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, LatentVideo, SimilarityMap, Tensor, TokenSequence};

/// Sign applied to the text-image cosine. The printed formula carries a
/// minus sign that contradicts the max-exceeds-threshold selection rule,
/// so the positive form is the default and the printed form stays
/// available for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    PaperNegative,
    Positive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub tau_sel: f64,
    pub tau_cache: f64,
    pub tau_region: f64,
    pub lambda_txt: f64,
    pub lambda_lat: f64,
    pub lambda_cache: f64,
    pub sign_mode: SignMode,
    pub weak_layers: BTreeSet<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            tau_sel: 0.2,
            tau_cache: 0.3,
            tau_region: 0.5,
            lambda_txt: 0.1,
            lambda_lat: 0.1,
            lambda_cache: 0.1,
            sign_mode: SignMode::Positive,
            weak_layers: BTreeSet::new(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.tau_sel,
            self.tau_cache,
            self.tau_region,
            self.lambda_txt,
            self.lambda_lat,
            self.lambda_cache,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite guidance parameter".into()));
        }
        if self.lambda_txt < 0.0 || self.lambda_lat < 0.0 || self.lambda_cache < 0.0 {
            return Err(Error::Config("lambda values must be >= 0".into()));
        }
        Ok(())
    }

    /// All injection strengths zero: guidance is a no-op.
    pub fn disabled() -> GuidanceConfig {
        GuidanceConfig {
            lambda_txt: 0.0,
            lambda_lat: 0.0,
            lambda_cache: 0.0,
            ..GuidanceConfig::default()
        }
    }
}

/// Keyword-token similarity S[m][n] = +/- cos(t_m, v_n) per sign mode.
pub fn keyword_similarity(
    c_text: &TokenSequence,
    c_img: &TokenSequence,
    sign_mode: SignMode,
) -> Result<Tensor> {
    if c_text.dim != c_img.dim {
        return Err(Error::Shape(format!(
            "text dim {} != image dim {}",
            c_text.dim, c_img.dim
        )));
    }
    let (m, n) = (c_text.len(), c_img.len());
    let sign = match sign_mode {
        SignMode::PaperNegative => -1.0,
        SignMode::Positive => 1.0,
    };
    let mut data = Vec::with_capacity(m * n);
    for t in &c_text.tokens {
        for v in &c_img.tokens {
            data.push(sign * cosine_similarity(t, v)?);
        }
    }
    Tensor::new(vec![m, n], data)
}

/// Keyword set: rows of S whose maximum exceeds tau_sel.
pub fn select_keywords(similarity: &Tensor, tau_sel: f64) -> Result<Vec<usize>> {
    if similarity.rank() != 2 {
        return Err(Error::Shape("similarity must be [M,N]".into()));
    }
    let (m, n) = (similarity.shape()[0], similarity.shape()[1]);
    let mut selected = Vec::new();
    for row in 0..m {
        let max = similarity.data()[row * n..(row + 1) * n]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if max > tau_sel {
            selected.push(row);
        }
    }
    Ok(selected)
}

/// Visual anchor: similarity-weighted sum of the image tokens.
/// Returns (anchor, degenerate) where degenerate flags an all-zero row.
pub fn compute_anchor(s_row: &[f64], c_img: &TokenSequence) -> Result<(Vec<f64>, bool)> {
    if s_row.len() != c_img.len() {
        return Err(Error::Shape("similarity row length != token count".into()));
    }
    let mut anchor = vec![0.0; c_img.dim];
    for (w, tok) in s_row.iter().zip(&c_img.tokens) {
        for (a, t) in anchor.iter_mut().zip(tok) {
            *a += w * t;
        }
    }
    let degenerate = s_row.iter().all(|&w| w == 0.0);
    Ok((anchor, degenerate))
}

/// Project a text embedding and its anchor into the shared DiT space via
/// the model's learned linear maps.
pub fn project_anchor_and_text(
    t_k: &[f64],
    v_anchor: &[f64],
    p_t: &Mat,
    p_v: &Mat,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if t_k.len() != p_t.rows || v_anchor.len() != p_v.rows {
        return Err(Error::Shape("projection input dim mismatch".into()));
    }
    let project = |v: &[f64], p: &Mat| -> Vec<f64> {
        let mut out = vec![0.0; p.cols];
        for (i, &x) in v.iter().enumerate() {
            for j in 0..p.cols {
                out[j] += x * p.at(i, j);
            }
        }
        out
    };
    Ok((project(t_k, p_t), project(v_anchor, p_v)))
}

/// Additive text-value fusion: V_text + lambda_txt * V_vis. Queries and
/// keys of the token are untouched by contract.
pub fn fuse_text_value(v_text: &[f64], v_vis: &[f64], lambda_txt: f64) -> Result<Vec<f64>> {
    if v_text.len() != v_vis.len() {
        return Err(Error::Shape("value dims differ".into()));
    }
    if lambda_txt == 0.0 {
        return Ok(v_text.to_vec());
    }
    Ok(v_text
        .iter()
        .zip(v_vis)
        .map(|(&t, &v)| t + lambda_txt * v)
        .collect())
}

/// Thresholded spatial region with max-normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// (y, x) cells, row-major order.
    pub cells: Vec<(usize, usize)>,
    /// Weight per cell, aligned with `cells`; max weight is 1.
    pub weights: Vec<f64>,
}

/// Cells of the [H', W'] similarity grid above tau_region, with weights
/// max-normalized within the region. Returns None when the region is
/// empty (keyword dropped).
pub fn extract_region(s_grid: &Tensor, tau_region: f64) -> Result<Option<Region>> {
    if s_grid.rank() != 2 {
        return Err(Error::Shape("region grid must be [H,W]".into()));
    }
    let (h, w) = (s_grid.shape()[0], s_grid.shape()[1]);
    let mut cells = Vec::new();
    let mut weights = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = s_grid.data()[y * w + x];
            if v > tau_region {
                cells.push((y, x));
                weights.push(v);
            }
        }
    }
    if cells.is_empty() {
        return Ok(None);
    }
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        for w in weights.iter_mut() {
            *w /= max;
        }
    }
    Ok(Some(Region { cells, weights }))
}

/// Region-weighted latent injection: z_ref[y,x] += lambda_lat * w * value
/// for every region cell, keywords applied in ascending order. The value
/// vector must match the latent channel count.
pub fn inject_latent(
    z_ref: &mut LatentVideo,
    keywords: &[(Region, Vec<f64>)],
    lambda_lat: f64,
) -> Result<()> {
    if lambda_lat == 0.0 {
        return Ok(());
    }
    for (region, value) in keywords {
        if value.len() != z_ref.channels {
            return Err(Error::Shape("inject value dim != latent channels".into()));
        }
        for (&(y, x), &w) in region.cells.iter().zip(&region.weights) {
            if y >= z_ref.height || x >= z_ref.width {
                return Err(Error::Shape(format!("region cell ({y},{x}) out of grid")));
            }
            let cell = z_ref.cell_mut(0, y, x);
            for (c, &v) in cell.iter_mut().zip(value) {
                *c += lambda_lat * w * v;
            }
        }
    }
    Ok(())
}

/// Per-position cosine similarity between a keyword value and the layer's
/// visual features: A(f,y,x) = cos(v_k, z(f,y,x)). Zero-norm features map
/// to 0.
pub fn layer_similarity(
    v_k: &[f64],
    visual: &Mat,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    if visual.rows != frames * height * width {
        return Err(Error::Shape("visual rows != F*H*W".into()));
    }
    if visual.cols != v_k.len() {
        return Err(Error::Shape("feature dim != keyword value dim".into()));
    }
    let data: Vec<f64> = (0..visual.rows)
        .map(|r| match cosine_similarity(v_k, visual.row(r)) {
            Ok(c) => c,
            Err(_) => 0.0,
        })
        .collect();
    Tensor::new(vec![frames, height, width], data)
}

/// Strong-layer cache aggregation: alpha_l = 0 for weak layers and
/// 1/(L-m) otherwise; cache = sum alpha_l * A_l.
pub fn aggregate_cache(
    layer_maps: &[SimilarityMap],
    weak: &BTreeSet<usize>,
) -> Result<SimilarityMap> {
    let layers = layer_maps.len();
    if layers == 0 {
        return Err(Error::Config("no layer maps".into()));
    }
    let m = weak.iter().filter(|&&l| l < layers).count();
    if m >= layers {
        return Err(Error::Numeric("no semantically responsive layers".into()));
    }
    let alpha = 1.0 / (layers - m) as f64;
    let shape = layer_maps[0].tensor.shape().to_vec();
    let mut acc = vec![0.0; layer_maps[0].tensor.len()];
    for (l, map) in layer_maps.iter().enumerate() {
        if map.tensor.shape() != shape {
            return Err(Error::Shape("layer map shapes differ".into()));
        }
        if weak.contains(&l) {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(map.tensor.data()) {
            *a += alpha * v;
        }
    }
    SimilarityMap::new(Tensor::new(shape, acc)?, layer_maps[0].norm)
}

/// Zero out values <= tau_cache, keep the rest verbatim. Idempotent.
pub fn threshold_cache(map: &Tensor, tau_cache: f64) -> Tensor {
    map.map(|v| if v > tau_cache { v } else { 0.0 })
        .expect("thresholding keeps values finite")
}

/// Weak-layer update: z(u,v) += lambda_cache * A_k(u,v) * v_k for every
/// keyword in ascending order. `layer` must be in the weak set.
pub fn apply_cache(
    z: &mut Mat,
    keyword_maps: &[Vec<f64>],
    keyword_values: &[Vec<f64>],
    lambda_cache: f64,
    layer: usize,
    weak: &BTreeSet<usize>,
) -> Result<()> {
    if !weak.contains(&layer) {
        return Err(Error::Config(format!(
            "apply_cache on non-weak layer {layer}"
        )));
    }
    if keyword_maps.len() != keyword_values.len() {
        return Err(Error::Shape("maps/values count mismatch".into()));
    }
    if lambda_cache == 0.0 {
        return Ok(());
    }
    for (map, value) in keyword_maps.iter().zip(keyword_values) {
        if map.len() != z.rows {
            return Err(Error::Shape("cache map length != token count".into()));
        }
        if value.len() != z.cols {
            return Err(Error::Shape("value dim != feature dim".into()));
        }
        for (r, &a) in map.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (c, &v) in value.iter().enumerate() {
                *z.at_mut(r, c) += lambda_cache * a * v;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{Modality, NormState};

    fn tokens(modality: Modality, vecs: Vec<Vec<f64>>) -> TokenSequence {
        let dim = vecs[0].len();
        TokenSequence::new(modality, dim, vecs).unwrap()
    }

    #[test]
    fn similarity_signs() {
        let t = tokens(Modality::Text, vec![vec![1.0, 0.0]]);
        let v = tokens(Modality::Image, vec![vec![2.0, 0.0], vec![0.0, 1.0]]);
        let neg = keyword_similarity(&t, &v, SignMode::PaperNegative).unwrap();
        assert_eq!(neg.data(), &[-1.0, 0.0]);
        let pos = keyword_similarity(&t, &v, SignMode::Positive).unwrap();
        assert_eq!(pos.data(), &[1.0, 0.0]);
    }

    #[test]
    fn similarity_matches_elementwise_oracle() {
        let mut rng = Rng::new(1);
        let t = tokens(
            Modality::Text,
            (0..4).map(|_| (0..6).map(|_| rng.normal()).collect()).collect(),
        );
        let v = tokens(
            Modality::Image,
            (0..6).map(|_| (0..6).map(|_| rng.normal()).collect()).collect(),
        );
        let s = keyword_similarity(&t, &v, SignMode::Positive).unwrap();
        for m in 0..4 {
            for n in 0..6 {
                let want = cosine_similarity(&t.tokens[m], &v.tokens[n]).unwrap();
                assert!((s.data()[m * 6 + n] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn similarity_rejects_zero_norm_and_dim_mismatch() {
        let t = tokens(Modality::Text, vec![vec![0.0, 0.0]]);
        let v = tokens(Modality::Image, vec![vec![1.0, 0.0]]);
        assert!(keyword_similarity(&t, &v, SignMode::Positive).is_err());
        let t2 = tokens(Modality::Text, vec![vec![1.0, 0.0, 0.0]]);
        assert!(keyword_similarity(&t2, &v, SignMode::Positive).is_err());
    }

    #[test]
    fn keyword_selection_rule() {
        let s = Tensor::new(
            vec![3, 2],
            vec![0.2, 0.1, 0.6, 0.0, 0.4, 0.3],
        )
        .unwrap();
        assert_eq!(select_keywords(&s, 0.5).unwrap(), vec![1]);
        assert_eq!(select_keywords(&s, f64::INFINITY).unwrap(), Vec::<usize>::new());
        assert_eq!(select_keywords(&s, -10.0).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn anchor_one_hot_and_uniform() {
        let v = tokens(
            Modality::Image,
            vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
        );
        let (one_hot, deg) = compute_anchor(&[0.0, 1.0, 0.0], &v).unwrap();
        assert_eq!(one_hot, vec![3.0, 4.0]);
        assert!(!deg);
        let (zero, deg) = compute_anchor(&[0.0, 0.0, 0.0], &v).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        assert!(deg);
        let third = 1.0 / 3.0;
        let (mean, _) = compute_anchor(&[third, third, third], &v).unwrap();
        assert!((mean[0] - 3.0).abs() < 1e-12);
        assert!((mean[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn projection_identity_zero_and_oracle() {
        let eye = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Mat::zeros(2, 2);
        let (t_hat, v_hat) =
            project_anchor_and_text(&[0.3, -0.7], &[1.0, 2.0], &eye, &zero).unwrap();
        assert_eq!(t_hat, vec![0.3, -0.7]);
        assert_eq!(v_hat, vec![0.0, 0.0]);

        let mut rng = Rng::new(2);
        let p = Mat::random_uniform(3, 4, -1.0, 1.0, &mut rng);
        let x = [0.5, -1.0, 2.0];
        let (got, _) = project_anchor_and_text(&x, &[0.0, 0.0, 0.0], &p, &p).unwrap();
        for j in 0..4 {
            let want: f64 = (0..3).map(|i| x[i] * p.at(i, j)).sum();
            assert!((got[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_edge_cases() {
        let t = [1.0, -2.0];
        assert_eq!(fuse_text_value(&t, &[9.0, 9.0], 0.0).unwrap(), t.to_vec());
        let cancelled = fuse_text_value(&t, &[-1.0, 2.0], 1.0).unwrap();
        assert_eq!(cancelled, vec![0.0, 0.0]);
    }

    #[test]
    fn region_extraction() {
        let full = Tensor::new(vec![2, 2], vec![0.9, 0.8, 0.7, 0.95]).unwrap();
        let r = extract_region(&full, 0.5).unwrap().unwrap();
        assert_eq!(r.cells.len(), 4);
        assert!((r.weights.iter().cloned().fold(f64::MIN, f64::max) - 1.0).abs() < 1e-15);

        let single = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.2, 0.3]).unwrap();
        let r = extract_region(&single, 0.5).unwrap().unwrap();
        assert_eq!(r.cells, vec![(0, 1)]);
        assert_eq!(r.weights, vec![1.0]);

        let empty = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(extract_region(&empty, 0.5).unwrap().is_none());
    }

    #[test]
    fn region_matches_filter_normalize_oracle() {
        let mut rng = Rng::new(3);
        let data: Vec<f64> = (0..30).map(|_| rng.next_f64()).collect();
        let grid = Tensor::new(vec![5, 6], data.clone()).unwrap();
        let tau = 0.4;
        let r = extract_region(&grid, tau).unwrap().unwrap();
        let mut want: Vec<((usize, usize), f64)> = Vec::new();
        for y in 0..5 {
            for x in 0..6 {
                let v = data[y * 6 + x];
                if v > tau {
                    want.push(((y, x), v));
                }
            }
        }
        let max = want.iter().map(|&(_, v)| v).fold(f64::MIN, f64::max);
        assert_eq!(r.cells.len(), want.len());
        for (i, &((y, x), v)) in want.iter().enumerate() {
            assert_eq!(r.cells[i], (y, x));
            assert!((r.weights[i] - v / max).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_injection_locality_and_formula() {
        let mut rng = Rng::new(4);
        let base = LatentVideo::random_normal(1, 3, 3, 2, &mut rng).unwrap();

        // lambda = 0 leaves everything bit-unchanged
        let mut z = base.clone();
        let region = Region {
            cells: vec![(1, 1)],
            weights: vec![1.0],
        };
        inject_latent(&mut z, &[(region.clone(), vec![5.0, -3.0])], 0.0).unwrap();
        for (a, b) in z.tensor.data().iter().zip(base.tensor.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // single cell, w = 1, lambda = 2
        let mut z = base.clone();
        inject_latent(&mut z, &[(region, vec![5.0, -3.0])], 2.0).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let old = base.cell(0, y, x);
                let new = z.cell(0, y, x);
                if (y, x) == (1, 1) {
                    assert_eq!(new[0], old[0] + 2.0 * 5.0);
                    assert_eq!(new[1], old[1] + 2.0 * -3.0);
                } else {
                    assert_eq!(new[0].to_bits(), old[0].to_bits());
                    assert_eq!(new[1].to_bits(), old[1].to_bits());
                }
            }
        }
    }

    #[test]
    fn inject_rejects_out_of_grid() {
        let mut z = LatentVideo::zeros(1, 2, 2, 1).unwrap();
        let region = Region {
            cells: vec![(5, 0)],
            weights: vec![1.0],
        };
        assert!(inject_latent(&mut z, &[(region, vec![1.0])], 0.5).is_err());
    }

    #[test]
    fn layer_similarity_extremes_and_oracle() {
        let v_k = [1.0, 0.0];
        let same = Mat::from_vec(4, 2, vec![2.0, 0.0, 3.0, 0.0, 0.5, 0.0, 1.0, 0.0]).unwrap();
        let map = layer_similarity(&v_k, &same, 1, 2, 2).unwrap();
        assert!(map.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let orth = Mat::from_vec(4, 2, vec![0.0, 1.0, 0.0, -2.0, 0.0, 3.0, 0.0, 0.5]).unwrap();
        let map = layer_similarity(&v_k, &orth, 1, 2, 2).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));

        let mut rng = Rng::new(5);
        let feats = Mat::random_uniform(6, 3, -1.0, 1.0, &mut rng);
        let v3 = [0.3, -0.5, 0.9];
        let map = layer_similarity(&v3, &feats, 1, 2, 3).unwrap();
        for r in 0..6 {
            let want = cosine_similarity(&v3, feats.row(r)).unwrap();
            assert!((map.data()[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_similarity_zero_norm_cell_is_zero() {
        let v_k = [1.0, 1.0];
        let feats = Mat::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let map = layer_similarity(&v_k, &feats, 1, 1, 2).unwrap();
        assert_eq!(map.data()[0], 0.0);
        assert!((map.data()[1] - 1.0).abs() < 1e-15);
    }

    fn map_of(data: Vec<f64>) -> SimilarityMap {
        SimilarityMap::new(Tensor::new(vec![1, 1, 2, 2], data).unwrap(), NormState::Raw).unwrap()
    }

    #[test]
    fn cache_aggregation_weights() {
        let m1 = map_of(vec![1.0, 2.0, 3.0, 4.0]);
        let maps = vec![m1.clone(), m1.clone(), m1.clone(), m1.clone()];
        let weak = BTreeSet::from([0, 1]);
        let cache = aggregate_cache(&maps, &weak).unwrap();
        // alpha = [0, 0, 0.5, 0.5] over identical maps -> the map itself
        for (a, b) in cache.tensor.data().iter().zip(m1.tensor.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cache_aggregation_matches_weighted_sum_oracle() {
        let mut rng = Rng::new(6);
        let maps: Vec<SimilarityMap> = (0..4)
            .map(|_| map_of((0..4).map(|_| rng.normal()).collect()))
            .collect();
        let weak = BTreeSet::from([2]);
        let cache = aggregate_cache(&maps, &weak).unwrap();
        for i in 0..4 {
            let want = (maps[0].tensor.data()[i]
                + maps[1].tensor.data()[i]
                + maps[3].tensor.data()[i])
                / 3.0;
            assert!((cache.tensor.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_aggregation_rejects_all_weak() {
        let maps = vec![map_of(vec![0.0; 4]), map_of(vec![0.0; 4])];
        let weak = BTreeSet::from([0, 1]);
        assert!(aggregate_cache(&maps, &weak).is_err());
    }

    #[test]
    fn threshold_literal_and_idempotent() {
        let t = Tensor::new(vec![1, 2], vec![0.3, 0.6]).unwrap();
        let out = threshold_cache(&t, 0.5);
        assert_eq!(out.data(), &[0.0, 0.6]);
        let unchanged = threshold_cache(&t, f64::NEG_INFINITY);
        assert_eq!(unchanged.data(), t.data());
        let twice = threshold_cache(&out, 0.5);
        assert_eq!(twice.data(), out.data());
    }

    #[test]
    fn apply_cache_contract_and_locality() {
        let weak = BTreeSet::from([3]);
        let mut rng = Rng::new(7);
        let base = Mat::random_uniform(4, 2, -1.0, 1.0, &mut rng);

        // non-weak layer is a contract violation
        let mut z = base.clone();
        assert!(apply_cache(&mut z, &[], &[], 0.1, 0, &weak).is_err());

        // lambda = 0 bit-unchanged
        let mut z = base.clone();
        apply_cache(
            &mut z,
            &[vec![1.0, 0.0, 0.5, 0.0]],
            &[vec![1.0, 1.0]],
            0.0,
            3,
            &weak,
        )
        .unwrap();
        for (a, b) in z.data.iter().zip(&base.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // zero-support cells bit-unchanged
        let mut z = base.clone();
        apply_cache(
            &mut z,
            &[vec![0.8, 0.0, 0.5, 0.0]],
            &[vec![1.0, -1.0]],
            0.2,
            3,
            &weak,
        )
        .unwrap();
        for r in [1usize, 3] {
            for c in 0..2 {
                assert_eq!(z.at(r, c).to_bits(), base.at(r, c).to_bits());
            }
        }
        assert!((z.at(0, 0) - (base.at(0, 0) + 0.2 * 0.8)).abs() < 1e-15);
    }

    #[test]
    fn apply_cache_monotone_alignment() {
        let weak = BTreeSet::from([0]);
        let mut rng = Rng::new(8);
        for _ in 0..200 {
            let z0: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let before = cosine_similarity(&z0, &v).unwrap();
            if before.abs() > 1.0 - 1e-9 {
                continue; // collinear
            }
            let mut z = Mat::from_vec(1, 4, z0.clone()).unwrap();
            apply_cache(&mut z, &[vec![0.7]], &[v.clone()], 1e-3, 0, &weak).unwrap();
            let after = cosine_similarity(z.row(0), &v).unwrap();
            assert!(after >= before, "cos decreased: {before} -> {after}");
        }
    }
}
