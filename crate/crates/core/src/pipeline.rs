//! Run orchestration shared by the CLI and the end-to-end tests: layer
//! profiling over sampling steps, fine-grained semantic guidance setup,
//! and cache-augmented guided sampling.

use std::cell::Cell;
use std::collections::BTreeSet;

use crate::diagnostics::{
    identify_weak_layers, morans_i_layer, std_layer, LayerProfile, MoranOptions, WeakRule,
};
use crate::dit::{Conditioning, DitModel, GuidanceInject};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, euler_sample_with, VelocityField};
use crate::guidance::{
    aggregate_cache, compute_anchor, extract_region, keyword_similarity, layer_similarity,
    select_keywords, threshold_cache, GuidanceConfig, Region,
};
use crate::tensor::{LatentVideo, NormState, SimilarityMap, Tensor};

/// Sampling-schedule settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FlowConfig {
    pub steps: usize,
    /// How many evenly spaced steps the profiler inspects.
    pub profile_points: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            steps: 8,
            profile_points: 4,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.profile_points == 0 {
            return Err(Error::Config("profile_points must be >= 1".into()));
        }
        Ok(())
    }
}

/// Profiling output: per-(step, layer, keyword) Moran's I rows plus the
/// per-layer aggregate profile.
#[derive(Debug, Clone)]
pub struct ProfileResult {
    /// (step, layer, keyword, Moran's I of the normalized map).
    pub heatmap_rows: Vec<(usize, usize, usize, f64)>,
    pub profiles: Vec<LayerProfile>,
    pub weak_layers: BTreeSet<usize>,
}

/// Sample from noise while capturing text–visual similarity statistics at
/// evenly spaced steps. Keywords are the text tokens.
pub fn profile_model(
    model: &DitModel,
    cond: &Conditioning,
    guidance: Option<&GuidanceInject>,
    z1: &LatentVideo,
    flow: &FlowConfig,
    rule: &WeakRule,
) -> Result<ProfileResult> {
    flow.validate()?;
    let points = flow.profile_points.min(flow.steps);
    let sampled: BTreeSet<usize> = (0..points).map(|i| i * flow.steps / points).collect();
    let mut snapshots: Vec<(usize, LatentVideo)> = Vec::new();
    let bound = crate::dit::BoundModel {
        model,
        cond,
        guidance,
    };
    euler_sample_with(&bound, z1, flow.steps, |step, z| {
        if sampled.contains(&step) {
            snapshots.push((step, z.clone()));
        }
    })?;

    let layers = model.config.layers;
    let keywords = cond.c_text.len();
    let mut heatmap_rows = Vec::with_capacity(snapshots.len() * layers * keywords);
    let mut moran_sum = vec![0.0; layers];
    let mut std_sum = vec![0.0; layers];
    let (f, h, w) = (z1.frames, z1.height, z1.width);
    for (step, z) in &snapshots {
        let t = *step as f64 / flow.steps as f64;
        let (_, states) = model.forward(z, t, cond, guidance, true)?;
        for state in &states {
            for k in 0..keywords {
                let map = layer_similarity(state.text_values.row(k), &state.visual, f, h, w)?;
                let map = SimilarityMap::new(
                    Tensor::new(vec![1, f, h, w], map.data().to_vec())?,
                    NormState::Raw,
                )?
                .normalized();
                let moran = morans_i_layer(&map, 0, MoranOptions::default())?;
                heatmap_rows.push((*step, state.layer, k, moran));
                moran_sum[state.layer] += moran;
                std_sum[state.layer] += std_layer(&map, 0)?;
            }
        }
    }

    let denom = (snapshots.len() * keywords) as f64;
    let mut profiles: Vec<LayerProfile> = (0..layers)
        .map(|l| LayerProfile {
            layer: l,
            morans_i: moran_sum[l] / denom,
            std: std_sum[l] / denom,
            weak: false,
        })
        .collect();
    let weak_layers = identify_weak_layers(&profiles, rule)?;
    for p in &mut profiles {
        p.weak = weak_layers.contains(&p.layer);
    }
    Ok(ProfileResult {
        heatmap_rows,
        profiles,
        weak_layers,
    })
}

/// Which guidance branches are active for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FgSwitches {
    pub fsg: bool,
    pub cache: bool,
}

impl FgSwitches {
    pub fn off() -> FgSwitches {
        FgSwitches {
            fsg: false,
            cache: false,
        }
    }

    pub fn on() -> FgSwitches {
        FgSwitches {
            fsg: true,
            cache: true,
        }
    }

    pub fn any(&self) -> bool {
        self.fsg || self.cache
    }
}

/// Keyword grounding computed once per run: selected keywords, their
/// visual anchors, and the reference latent after region injection.
#[derive(Debug, Clone)]
pub struct FsgOutcome {
    pub cond: Conditioning,
    pub guidance: GuidanceInject,
    pub selected: Vec<usize>,
    /// (keyword text row, frame-0 region) pairs that received latent
    /// injection; keywords with empty regions are dropped from injection.
    pub injected: Vec<(usize, Region)>,
}

/// Ground the text keywords against the image tokens and assemble the
/// guidance bundle. The image tokens must tile the reference frame
/// (one per cell, row-major).
pub fn prepare_fsg(
    cond: &Conditioning,
    gcfg: &GuidanceConfig,
    switches: FgSwitches,
) -> Result<FsgOutcome> {
    gcfg.validate()?;
    let (h, w) = (cond.z_ref.height, cond.z_ref.width);
    if cond.c_img.len() != h * w {
        return Err(Error::Shape(format!(
            "image tokens {} do not tile the {h}x{w} reference frame",
            cond.c_img.len()
        )));
    }
    let similarity = keyword_similarity(&cond.c_text, &cond.c_img, gcfg.sign_mode)?;
    let selected = select_keywords(&similarity, gcfg.tau_sel)?;
    let n = cond.c_img.len();

    let mut keyword_rows = Vec::new();
    let mut anchors = Vec::new();
    let mut injections: Vec<(usize, Region, Vec<f64>)> = Vec::new();
    for &k in &selected {
        let row = &similarity.data()[k * n..(k + 1) * n];
        let (anchor, degenerate) = compute_anchor(row, &cond.c_img)?;
        if degenerate {
            continue;
        }
        // normalize over the whole frame (rank-2 tensors normalize per row)
        let grid = Tensor::new(vec![1, h, w], row.to_vec())?.minmax_normalize();
        let grid = Tensor::new(vec![h, w], grid.data().to_vec())?;
        if let Some(region) = extract_region(&grid, gcfg.tau_region)? {
            injections.push((k, region, anchor.clone()));
        }
        keyword_rows.push(k);
        anchors.push(anchor);
    }

    let mut cond = cond.clone();
    let lambda_lat = if switches.fsg { gcfg.lambda_lat } else { 0.0 };
    if lambda_lat > 0.0 {
        let pairs: Vec<(Region, Vec<f64>)> = injections
            .iter()
            .map(|(_, r, v)| (r.clone(), v.clone()))
            .collect();
        crate::guidance::inject_latent(&mut cond.z_ref, &pairs, lambda_lat)?;
    }

    let guidance = GuidanceInject {
        lambda_txt: if switches.fsg { gcfg.lambda_txt } else { 0.0 },
        lambda_cache: if switches.cache { gcfg.lambda_cache } else { 0.0 },
        keyword_rows,
        anchors,
        cache_maps: None,
        weak_layers: gcfg.weak_layers.clone(),
    };
    Ok(FsgOutcome {
        cond,
        guidance,
        selected,
        injected: injections.into_iter().map(|(k, r, _)| (k, r)).collect(),
    })
}

/// Velocity field that rebuilds the attention cache at every timestep:
/// a first hooked pass collects strong-layer keyword similarity maps,
/// which are aggregated, thresholded, and injected into the weak layers
/// of a second pass.
pub struct GuidedSampler<'a> {
    pub model: &'a DitModel,
    pub cond: &'a Conditioning,
    pub guidance: GuidanceInject,
    pub use_cache: bool,
    pub tau_cache: f64,
    /// Number of timesteps that actually ran the two-pass cache path.
    pub cache_passes: Cell<usize>,
}

impl GuidedSampler<'_> {
    fn cache_active(&self) -> bool {
        self.use_cache
            && self.guidance.lambda_cache > 0.0
            && !self.guidance.weak_layers.is_empty()
            && !self.guidance.keyword_rows.is_empty()
    }

    /// Build per-keyword thresholded cache maps from a hooked forward at
    /// (z, t), using the layer-local anchor values against the layer's
    /// visual features.
    pub fn build_cache(&self, z: &LatentVideo, t: f64) -> Result<Vec<Vec<f64>>> {
        let mut pass1 = self.guidance.clone();
        pass1.cache_maps = None;
        let (_, states) = self.model.forward(z, t, self.cond, Some(&pass1), true)?;
        let (f, h, w) = (z.frames, z.height, z.width);
        let k_count = self.guidance.keyword_rows.len();
        let mut per_layer = Vec::with_capacity(states.len());
        for state in &states {
            let mut data = Vec::with_capacity(k_count * f * h * w);
            for k in 0..k_count {
                let map = layer_similarity(state.anchor_values.row(k), &state.visual, f, h, w)?;
                data.extend_from_slice(map.data());
            }
            per_layer.push(SimilarityMap::new(
                Tensor::new(vec![k_count, f, h, w], data)?,
                NormState::Raw,
            )?);
        }
        let cache = aggregate_cache(&per_layer, &self.guidance.weak_layers)?;
        let thresholded = threshold_cache(&cache.tensor, self.tau_cache);
        let cells = f * h * w;
        Ok((0..k_count)
            .map(|k| thresholded.data()[k * cells..(k + 1) * cells].to_vec())
            .collect())
    }
}

impl VelocityField for GuidedSampler<'_> {
    fn velocity(&self, z: &LatentVideo, t: f64) -> Result<LatentVideo> {
        if !self.cache_active() {
            let mut g = self.guidance.clone();
            g.cache_maps = None;
            return Ok(self.model.forward(z, t, self.cond, Some(&g), false)?.0);
        }
        let maps = self.build_cache(z, t)?;
        let mut g = self.guidance.clone();
        g.cache_maps = Some(maps);
        self.cache_passes.set(self.cache_passes.get() + 1);
        Ok(self.model.forward(z, t, self.cond, Some(&g), false)?.0)
    }
}

/// Per-run counters reported in manifests and asserted by ablation tests.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunStats {
    pub selected_keywords: Vec<usize>,
    pub injected_keywords: Vec<usize>,
    pub cache_passes: usize,
}

/// Sample a latent video from noise with the requested guidance branches.
pub fn guided_sample(
    model: &DitModel,
    cond: &Conditioning,
    gcfg: &GuidanceConfig,
    switches: FgSwitches,
    z1: &LatentVideo,
    steps: usize,
) -> Result<(LatentVideo, RunStats)> {
    if !switches.any() {
        let bound = crate::dit::BoundModel {
            model,
            cond,
            guidance: None,
        };
        let out = euler_sample(&bound, z1, steps)?;
        return Ok((
            out,
            RunStats {
                selected_keywords: Vec::new(),
                injected_keywords: Vec::new(),
                cache_passes: 0,
            },
        ));
    }
    let prep = prepare_fsg(cond, gcfg, switches)?;
    let sampler = GuidedSampler {
        model,
        cond: &prep.cond,
        guidance: prep.guidance,
        use_cache: switches.cache,
        tau_cache: gcfg.tau_cache,
        cache_passes: Cell::new(0),
    };
    let out = euler_sample(&sampler, z1, steps)?;
    Ok((
        out,
        RunStats {
            selected_keywords: prep.selected,
            injected_keywords: prep.injected.iter().map(|(k, _)| *k).collect(),
            cache_passes: sampler.cache_passes.get(),
        },
    ))
}
