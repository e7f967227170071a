//! The five subcommands. Each one resolves `--replay`, does its work
//! under `--out`, and finishes by writing the run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use fg_core::bench::{dimension_score, score_case, PromptCase, ScoreReport};
use fg_core::diagnostics::{export_layer_profiles, export_step_layer_heatmap, WeakRule};
use fg_core::dit::{Conditioning, ConditioningMode, DitConfig, DitModel, TrainSample};
use fg_core::flow::FlowPath;
use fg_core::guidance::{GuidanceConfig, SignMode};
use fg_core::pipeline::{guided_sample, profile_model, FgSwitches, FlowConfig};
use fg_core::rng::Rng;
use fg_core::synth::{render_scene, SceneSpec};
use fg_core::tensor::{LatentVideo, Modality, Tensor, TokenSequence};
use fg_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::manifest::{maybe_replay, prepare_out_dir, RunManifest};

const SCENE_FILE: &str = "scene.json";
const TOKENS_FILE: &str = "tokens.json";

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// `bottom:<fraction>` or `list:<indices>` (e.g. `list:2-5`, `list:1,3`).
fn parse_weak_rule(text: &str) -> Result<WeakRule> {
    if let Some(q) = text.strip_prefix("bottom:") {
        let q: f64 = q
            .parse()
            .map_err(|_| Error::Config(format!("bad weak-rule fraction '{q}'")))?;
        return Ok(WeakRule::BottomFraction(q));
    }
    if let Some(list) = text.strip_prefix("list:") {
        let mut layers = Vec::new();
        for part in list.split(',') {
            match part.split_once('-') {
                Some((lo, hi)) => {
                    let lo: usize = lo
                        .parse()
                        .map_err(|_| Error::Config(format!("bad layer range '{part}'")))?;
                    let hi: usize = hi
                        .parse()
                        .map_err(|_| Error::Config(format!("bad layer range '{part}'")))?;
                    if hi < lo {
                        return Err(Error::Config(format!("bad layer range '{part}'")));
                    }
                    layers.extend(lo..=hi);
                }
                None => layers.push(
                    part.parse()
                        .map_err(|_| Error::Config(format!("bad layer index '{part}'")))?,
                ),
            }
        }
        return Ok(WeakRule::Explicit(layers));
    }
    Err(Error::Config(format!(
        "weak rule must be 'bottom:<fraction>' or 'list:<layers>', got '{text}'"
    )))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokensFile {
    text_dim: usize,
    text: Vec<Vec<f64>>,
    img_dim: usize,
    img: Vec<Vec<f64>>,
}

/// Load a synth output directory back into memory.
fn load_data(data: &Path) -> Result<(SceneSpec, LatentVideo, Conditioning)> {
    let spec: SceneSpec = read_json(&data.join(SCENE_FILE))?;
    let latent = LatentVideo::new(Tensor::load(data.join("latent.fgt"))?)?;
    let z_ref = LatentVideo::new(Tensor::load(data.join("z_ref.fgt"))?)?;
    let tokens: TokensFile = read_json(&data.join(TOKENS_FILE))?;
    let cond = Conditioning {
        c_text: TokenSequence::new(Modality::Text, tokens.text_dim, tokens.text)?,
        c_img: TokenSequence::new(Modality::Image, tokens.img_dim, tokens.img)?,
        z_ref,
    };
    Ok((spec, latent, cond))
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::CrossAttention)]
    pub mode: ModeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    CrossAttention,
    TokenConcat,
}

impl From<ModeArg> for ConditioningMode {
    fn from(m: ModeArg) -> ConditioningMode {
        match m {
            ModeArg::CrossAttention => ConditioningMode::CrossAttention,
            ModeArg::TokenConcat => ConditioningMode::TokenConcat,
        }
    }
}

impl ModelArgs {
    fn config(&self, channels: usize, seed: u64) -> DitConfig {
        DitConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            conditioning_mode: self.mode.into(),
            channels,
            text_dim: channels,
            img_dim: channels,
            seed,
        }
    }
}

/// Build a model from a checkpoint when given, otherwise freshly seeded.
fn resolve_model(
    checkpoint: Option<&PathBuf>,
    model_args: &ModelArgs,
    channels: usize,
    seed: u64,
) -> Result<DitModel> {
    match checkpoint {
        Some(dir) => DitModel::load_checkpoint(dir),
        None => DitModel::new(model_args.config(channels, seed)),
    }
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Scene description JSON.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replay a previous run's manifest (the new --out still applies).
    #[arg(long)]
    #[serde(skip)]
    pub replay: Option<PathBuf>,
}

pub fn run_synth(mut args: SynthArgs) -> Result<()> {
    if let Some(stored) = maybe_replay::<SynthArgs>(args.replay.as_ref(), "synth")? {
        args = SynthArgs {
            out: args.out,
            replay: None,
            ..stored
        };
    }
    let spec: SceneSpec = read_json(&args.spec)?;
    let scene = render_scene(&spec, args.seed)?;
    prepare_out_dir(&args.out)?;

    write_json(&args.out.join(SCENE_FILE), &spec)?;
    scene.latent.tensor.save(args.out.join("latent.fgt"))?;
    scene.z_ref.tensor.save(args.out.join("z_ref.fgt"))?;
    write_json(
        &args.out.join(TOKENS_FILE),
        &TokensFile {
            text_dim: scene.c_text.dim,
            text: scene.c_text.tokens.clone(),
            img_dim: scene.c_img.dim,
            img: scene.c_img.tokens.clone(),
        },
    )?;
    let regions: Vec<Vec<(usize, usize)>> = scene
        .true_regions
        .iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    write_json(&args.out.join("regions.json"), &regions)?;

    let mut manifest = RunManifest::new("synth", args.seed, &args)?;
    manifest.artifacts = vec![
        SCENE_FILE.into(),
        "latent.fgt".into(),
        "z_ref.fgt".into(),
        TOKENS_FILE.into(),
        "regions.json".into(),
    ];
    manifest.write(&args.out)
}

// -------------------------------------------------------------- profile

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProfileArgs {
    /// Directory produced by `fg synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub points: usize,
    #[arg(long, default_value = "bottom:0.25")]
    pub weak_rule: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    #[serde(skip)]
    pub replay: Option<PathBuf>,
}

pub fn run_profile(mut args: ProfileArgs) -> Result<()> {
    if let Some(stored) = maybe_replay::<ProfileArgs>(args.replay.as_ref(), "profile")? {
        args = ProfileArgs {
            out: args.out,
            replay: None,
            ..stored
        };
    }
    let rule = parse_weak_rule(&args.weak_rule)?;
    let (spec, _, cond) = load_data(&args.data)?;
    let model = resolve_model(args.checkpoint.as_ref(), &args.model, spec.channels, args.seed)?;
    let mut rng = Rng::new(args.seed);
    let z1 = LatentVideo::random_normal(spec.frames, spec.height, spec.width, spec.channels, &mut rng)?;
    let flow = FlowConfig {
        steps: args.steps,
        profile_points: args.points,
    };
    let result = profile_model(&model, &cond, None, &z1, &flow, &rule)?;

    prepare_out_dir(&args.out)?;
    export_step_layer_heatmap(&result.heatmap_rows, args.out.join("heatmap.csv"))?;
    export_layer_profiles(&result.profiles, args.out.join("profiles.csv"))?;
    write_json(&args.out.join("profiles.json"), &result.profiles)?;

    let mut manifest = RunManifest::new("profile", args.seed, &args)?;
    manifest.artifacts = vec![
        "heatmap.csv".into(),
        "profiles.csv".into(),
        "profiles.json".into(),
    ];
    manifest.stats = Some(serde_json::json!({
        "weak_layers": result.weak_layers.iter().collect::<Vec<_>>(),
    }));
    manifest.write(&args.out)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Layers to train, e.g. `list:2-5`; everything else stays frozen.
    #[arg(long, default_value = "list:0-7")]
    pub train_layers: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    #[serde(skip)]
    pub replay: Option<PathBuf>,
}

pub fn run_train(mut args: TrainArgs) -> Result<()> {
    if let Some(stored) = maybe_replay::<TrainArgs>(args.replay.as_ref(), "train")? {
        args = TrainArgs {
            out: args.out,
            replay: None,
            ..stored
        };
    }
    let mask: BTreeSet<usize> = match parse_weak_rule(&args.train_layers)? {
        WeakRule::Explicit(layers) => layers.into_iter().collect(),
        WeakRule::BottomFraction(_) => {
            return Err(Error::Config(
                "train layers must be an explicit list (list:...)".into(),
            ))
        }
    };
    let (spec, latent, cond) = load_data(&args.data)?;
    let mut model =
        resolve_model(args.checkpoint.as_ref(), &args.model, spec.channels, args.seed)?;

    let mut rng = Rng::new(args.seed ^ 0x7261696E); // distinct noise stream
    let samples: Vec<TrainSample> = (0..4)
        .map(|i| {
            let z1 = LatentVideo::random_normal(
                spec.frames,
                spec.height,
                spec.width,
                spec.channels,
                &mut rng,
            )?;
            Ok(TrainSample {
                path: FlowPath::new(latent.clone(), z1)?,
                t: 0.2 * (i + 1) as f64,
                cond: cond.clone(),
                guidance: None,
            })
        })
        .collect::<Result<_>>()?;

    let mut curve = String::from("step,loss\n");
    let mut initial = None;
    for step in 0..args.steps {
        let loss = model.train_step(&samples, &mask, args.lr)?;
        let initial = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > 1e3 * initial.max(1.0) {
            return Err(Error::Numeric(format!("training diverged at step {step}")));
        }
        curve.push_str(&format!("{step},{loss}\n"));
    }

    prepare_out_dir(&args.out)?;
    std::fs::write(args.out.join("loss_curve.csv"), curve)?;
    model.save_checkpoint(args.out.join("checkpoint"))?;

    let mut manifest = RunManifest::new("train", args.seed, &args)?;
    manifest.artifacts = vec!["loss_curve.csv".into(), "checkpoint".into()];
    manifest.write(&args.out)
}

// --------------------------------------------------------------- sample

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgFlag {
    On,
    Off,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = FgFlag::On)]
    pub fg: FgFlag,
    /// Keep fine-grained semantic guidance, skip the attention cache.
    #[arg(long, conflicts_with = "ac_only")]
    #[serde(default)]
    pub fsg_only: bool,
    /// Keep the attention cache, skip fine-grained semantic guidance.
    #[arg(long)]
    #[serde(default)]
    pub ac_only: bool,
    /// Weak layers: `list:<layers>` or `bottom:<fraction>` (profiled).
    #[arg(long, default_value = "bottom:0.25")]
    pub weak_rule: String,
    #[arg(long, default_value_t = GuidanceConfig::default().lambda_txt)]
    pub lambda_txt: f64,
    #[arg(long, default_value_t = GuidanceConfig::default().lambda_lat)]
    pub lambda_lat: f64,
    #[arg(long, default_value_t = GuidanceConfig::default().lambda_cache)]
    pub lambda_cache: f64,
    #[arg(long, default_value_t = GuidanceConfig::default().tau_sel)]
    pub tau_sel: f64,
    #[arg(long, default_value_t = GuidanceConfig::default().tau_cache)]
    pub tau_cache: f64,
    #[arg(long, default_value_t = GuidanceConfig::default().tau_region)]
    pub tau_region: f64,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    #[serde(skip)]
    pub replay: Option<PathBuf>,
}

pub fn run_sample(mut args: SampleArgs) -> Result<()> {
    if let Some(stored) = maybe_replay::<SampleArgs>(args.replay.as_ref(), "sample")? {
        args = SampleArgs {
            out: args.out,
            replay: None,
            ..stored
        };
    }
    let switches = match (args.fg, args.fsg_only, args.ac_only) {
        (FgFlag::Off, _, _) => FgSwitches::off(),
        (FgFlag::On, true, false) => FgSwitches {
            fsg: true,
            cache: false,
        },
        (FgFlag::On, false, true) => FgSwitches {
            fsg: false,
            cache: true,
        },
        (FgFlag::On, false, false) => FgSwitches::on(),
        (FgFlag::On, true, true) => {
            return Err(Error::Config(
                "--fsg-only and --ac-only are mutually exclusive".into(),
            ))
        }
    };
    let (spec, _, cond) = load_data(&args.data)?;
    let model = resolve_model(args.checkpoint.as_ref(), &args.model, spec.channels, args.seed)?;
    let mut rng = Rng::new(args.seed);
    let z1 = LatentVideo::random_normal(spec.frames, spec.height, spec.width, spec.channels, &mut rng)?;

    let weak_layers: BTreeSet<usize> = if switches.any() {
        match parse_weak_rule(&args.weak_rule)? {
            WeakRule::Explicit(layers) => layers.into_iter().collect(),
            rule @ WeakRule::BottomFraction(_) => {
                let flow = FlowConfig {
                    steps: args.steps,
                    profile_points: 2.min(args.steps),
                };
                profile_model(&model, &cond, None, &z1, &flow, &rule)?.weak_layers
            }
        }
    } else {
        BTreeSet::new()
    };
    let gcfg = GuidanceConfig {
        tau_sel: args.tau_sel,
        tau_cache: args.tau_cache,
        tau_region: args.tau_region,
        lambda_txt: args.lambda_txt,
        lambda_lat: args.lambda_lat,
        lambda_cache: args.lambda_cache,
        sign_mode: SignMode::Positive,
        weak_layers: weak_layers.clone(),
    };
    let (latent, stats) = guided_sample(&model, &cond, &gcfg, switches, &z1, args.steps)?;

    prepare_out_dir(&args.out)?;
    latent.tensor.save(args.out.join("sample.fgt"))?;

    let mut manifest = RunManifest::new("sample", args.seed, &args)?;
    manifest.artifacts = vec!["sample.fgt".into()];
    manifest.stats = Some(serde_json::json!({
        "guidance": gcfg,
        "weak_layers": weak_layers.iter().collect::<Vec<_>>(),
        "run": stats,
    }));
    manifest.write(&args.out)
}

// ---------------------------------------------------------------- score

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScoreArgs {
    /// Directory of prompt-case JSON files.
    #[arg(long)]
    pub cases: PathBuf,
    /// Directory the cases' `scene` fields resolve against.
    #[arg(long)]
    pub videos: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file overriding any of the five report metrics.
    #[arg(long)]
    pub external_metrics: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub replay: Option<PathBuf>,
}

pub fn run_score(mut args: ScoreArgs) -> Result<()> {
    if let Some(stored) = maybe_replay::<ScoreArgs>(args.replay.as_ref(), "score")? {
        args = ScoreArgs {
            out: args.out,
            replay: None,
            ..stored
        };
    }
    let mut case_files: Vec<PathBuf> = std::fs::read_dir(&args.cases)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    case_files.sort();
    if case_files.is_empty() {
        return Err(Error::Config(format!(
            "no case files in {}",
            args.cases.display()
        )));
    }

    let mut per_dimension: BTreeMap<&'static str, Vec<u8>> = BTreeMap::new();
    for path in &case_files {
        let case: PromptCase = read_json(path)?;
        let scene_path = args.videos.join(&case.scene);
        let spec: SceneSpec = read_json(&scene_path)?;
        let score = score_case(&case, &spec)?;
        per_dimension
            .entry(case.dimension.metric_name())
            .or_default()
            .push(score);
    }

    // consistency metrics default to 1.0 and are usually external inputs
    let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
    metrics.insert("i2v_subject".into(), 1.0);
    metrics.insert("i2v_background".into(), 1.0);
    for (name, scores) in &per_dimension {
        metrics.insert((*name).into(), dimension_score(scores)?);
    }
    if let Some(path) = &args.external_metrics {
        let overrides: BTreeMap<String, f64> = read_json(path)?;
        for (name, value) in overrides {
            metrics.insert(name, value);
        }
    }
    let report = ScoreReport::from_metrics(&metrics)?;

    prepare_out_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &report)?;
    let mut manifest = RunManifest::new("score", 0, &args)?;
    manifest.artifacts = vec!["report.json".into()];
    manifest.stats = Some(serde_json::json!({
        "cases": case_files.len(),
    }));
    manifest.write(&args.out)
}
