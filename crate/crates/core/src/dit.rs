//! Toy diffusion transformer used as the rectified-flow velocity model.
//!
//! Patch size is 1: every latent cell is one token. Two conditioning
//! topologies are supported: `cross_attention` (text+image tokens attended
//! via a cross-attention block, reference latent channel-concatenated onto
//! the first frame before patch embedding) and `token_concat` (condition
//! tokens concatenated along the token dimension before self-attention).
//! Blocks are pre-norm residual with softmax attention scaled by
//! 1/sqrt(D/heads). Training runs on the autodiff tape in `autodiff`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, NodeId, Tape};
use crate::error::{Error, Result};
use crate::flow::{interpolate, FlowPath, VelocityField};
use crate::rng::Rng;
use crate::tensor::{LatentVideo, Tensor, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    CrossAttention,
    TokenConcat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DitConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub conditioning_mode: ConditioningMode,
    pub channels: usize,
    pub text_dim: usize,
    pub img_dim: usize,
    pub seed: u64,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            layers: 8,
            hidden: 32,
            heads: 4,
            conditioning_mode: ConditioningMode::CrossAttention,
            channels: 4,
            text_dim: 4,
            img_dim: 4,
            seed: 0,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} must be divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.channels == 0 || self.text_dim == 0 || self.img_dim == 0 {
            return Err(Error::Config("dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Conditioning inputs for one forward pass.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub c_text: TokenSequence,
    pub c_img: TokenSequence,
    pub z_ref: LatentVideo,
}

/// Guidance data threaded into the forward pass. Cache maps are treated as
/// constants (no gradient flows through them).
#[derive(Debug, Clone, Default)]
pub struct GuidanceInject {
    pub lambda_txt: f64,
    pub lambda_cache: f64,
    /// Text-token indices of the selected keywords, ascending.
    pub keyword_rows: Vec<usize>,
    /// Raw visual anchors (img_dim each), one per keyword.
    pub anchors: Vec<Vec<f64>>,
    /// Per keyword: thresholded cache weights over the F'*H'*W' visual
    /// token grid, row-major.
    pub cache_maps: Option<Vec<Vec<f64>>>,
    pub weak_layers: BTreeSet<usize>,
}

/// Per-layer capture when hooks are enabled.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub layer: usize,
    /// Visual features at the layer output, [F'*H'*W', D].
    pub visual: Mat,
    /// Value vectors of the text tokens in the conditioning attention
    /// (post text-value fusion), [M, D].
    pub text_values: Mat,
    /// Per-keyword anchor value vectors at this layer, [K, D].
    pub anchor_values: Mat,
    /// Pre-softmax attention logits of the conditioning attention,
    /// [heads, T_q, T_k].
    pub attention_logits: Tensor,
}

pub struct DitModel {
    pub config: DitConfig,
    names: Vec<String>,
    params: Vec<Mat>,
    index: HashMap<String, usize>,
}

struct StateNodes {
    visual: NodeId,
    text_values: NodeId,
    anchor_values: Option<NodeId>,
    logits: Vec<NodeId>,
}

struct Built {
    velocity: NodeId,
    param_nodes: Vec<(usize, NodeId)>,
    states: Vec<StateNodes>,
}

impl DitModel {
    pub fn new(config: DitConfig) -> Result<DitModel> {
        config.validate()?;
        let d = config.hidden;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = Rng::new(config.seed);
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let c = config.channels;
        names.push("embed.frame0".to_string());
        shapes.push((2 * c, d));
        names.push("embed.rest".to_string());
        shapes.push((c, d));
        names.push("cond.p_t".to_string());
        shapes.push((config.text_dim, d));
        names.push("cond.p_v".to_string());
        shapes.push((config.img_dim, d));
        for l in 0..config.layers {
            for part in ["self.wq", "self.wk", "self.wv", "self.wo"] {
                names.push(format!("layer{l}.{part}"));
                shapes.push((d, d));
            }
            if config.conditioning_mode == ConditioningMode::CrossAttention {
                for part in ["cross.wq", "cross.wk", "cross.wv", "cross.wo"] {
                    names.push(format!("layer{l}.{part}"));
                    shapes.push((d, d));
                }
            }
            names.push(format!("layer{l}.mlp.w1"));
            shapes.push((d, d));
            names.push(format!("layer{l}.mlp.w2"));
            shapes.push((d, d));
        }
        names.push("out.proj".to_string());
        shapes.push((d, c));

        let params: Vec<Mat> = shapes
            .iter()
            .map(|&(r, c)| Mat::random_uniform(r, c, -bound, bound, &mut rng))
            .collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(DitModel {
            config,
            names,
            params,
            index,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> &Mat {
        &self.params[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Mat {
        &mut self.params[self.index[name]]
    }

    /// Layer index a parameter belongs to, if any.
    fn param_layer(name: &str) -> Option<usize> {
        name.strip_prefix("layer")?
            .split('.')
            .next()?
            .parse()
            .ok()
    }

    fn time_embedding(&self, t: f64) -> Vec<f64> {
        let d = self.config.hidden;
        let mut emb = vec![0.0; d];
        let half = d / 2;
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            emb[2 * i] = (t * freq).sin();
            emb[2 * i + 1] = (t * freq).cos();
        }
        emb
    }

    fn visual_input_mats(&self, z_t: &LatentVideo, z_ref: &LatentVideo) -> Result<(Mat, Option<Mat>)> {
        let c = self.config.channels;
        if z_t.channels != c {
            return Err(Error::Shape(format!(
                "latent channels {} != config {}",
                z_t.channels, c
            )));
        }
        if z_ref.frames != 1 || z_ref.height != z_t.height || z_ref.width != z_t.width
            || z_ref.channels != c
        {
            return Err(Error::Shape("z_ref must be [1, H', W', C] matching z_t".into()));
        }
        let t0 = z_t.height * z_t.width;
        let mut x0 = Vec::with_capacity(t0 * 2 * c);
        for y in 0..z_t.height {
            for x in 0..z_t.width {
                x0.extend_from_slice(z_t.cell(0, y, x));
                x0.extend_from_slice(z_ref.cell(0, y, x));
            }
        }
        let x0 = Mat::from_vec(t0, 2 * c, x0)?;
        let rest = if z_t.frames > 1 {
            let mut xr = Vec::with_capacity((z_t.frames - 1) * t0 * c);
            for f in 1..z_t.frames {
                for y in 0..z_t.height {
                    for x in 0..z_t.width {
                        xr.extend_from_slice(z_t.cell(f, y, x));
                    }
                }
            }
            Some(Mat::from_vec((z_t.frames - 1) * t0, c, xr)?)
        } else {
            None
        };
        Ok((x0, rest))
    }

    fn tokens_to_mat(seq: &TokenSequence) -> Mat {
        let mut data = Vec::with_capacity(seq.len() * seq.dim);
        for t in &seq.tokens {
            data.extend_from_slice(t);
        }
        Mat {
            rows: seq.len(),
            cols: seq.dim,
            data,
        }
    }

    /// Multi-head attention; returns (output node, per-head logit nodes).
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        queries: NodeId,
        keys_src: NodeId,
        values: NodeId,
        wq: NodeId,
        wk: NodeId,
        wo: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        let d = self.config.hidden;
        let heads = self.config.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let q = tape.matmul(queries, wq);
        let k = tape.matmul(keys_src, wk);
        let mut outs = Vec::with_capacity(heads);
        let mut logit_nodes = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(values, h * hd, hd);
            let raw = tape.matmul_nt(qh, kh);
            let logits = tape.scale(raw, scale);
            logit_nodes.push(logits);
            let attn = tape.softmax_rows(logits);
            outs.push(tape.matmul(attn, vh));
        }
        let concat = tape.concat_cols(outs);
        (tape.matmul(concat, wo), logit_nodes)
    }

    fn build_graph(
        &self,
        tape: &mut Tape,
        z_t: &LatentVideo,
        t: f64,
        cond: &Conditioning,
        guidance: Option<&GuidanceInject>,
    ) -> Result<Built> {
        let d = self.config.hidden;
        if cond.c_text.dim != self.config.text_dim {
            return Err(Error::Shape("text token dim != config text_dim".into()));
        }
        if cond.c_img.dim != self.config.img_dim {
            return Err(Error::Shape("image token dim != config img_dim".into()));
        }
        let visual_tokens = z_t.frames * z_t.height * z_t.width;

        let mut param_nodes = Vec::with_capacity(self.params.len());
        let mut node_of = vec![0usize; self.params.len()];
        for (i, p) in self.params.iter().enumerate() {
            let n = tape.leaf(p.clone());
            param_nodes.push((i, n));
            node_of[i] = n;
        }
        let pnode = |name: &str| node_of[self.index[name]];

        // patch embedding with z_ref channel-concat on frame 0
        let (x0_raw, rest_raw) = self.visual_input_mats(z_t, &cond.z_ref)?;
        let x0_leaf = tape.leaf(x0_raw);
        let x0 = tape.matmul(x0_leaf, pnode("embed.frame0"));
        let mut x = match rest_raw {
            Some(r) => {
                let rl = tape.leaf(r);
                let xr = tape.matmul(rl, pnode("embed.rest"));
                tape.concat_rows(x0, xr)
            }
            None => x0,
        };
        // sinusoidal time embedding added to every visual token
        let emb = self.time_embedding(t);
        let time_mat = Mat {
            rows: visual_tokens,
            cols: d,
            data: (0..visual_tokens).flat_map(|_| emb.iter().copied()).collect(),
        };
        let time_leaf = tape.leaf(time_mat);
        x = tape.add(x, time_leaf);

        // condition tokens in DiT space
        let text_leaf = tape.leaf(Self::tokens_to_mat(&cond.c_text));
        let text_proj = tape.matmul(text_leaf, pnode("cond.p_t"));
        let img_leaf = tape.leaf(Self::tokens_to_mat(&cond.c_img));
        let img_proj = tape.matmul(img_leaf, pnode("cond.p_v"));
        let n_text = cond.c_text.len();
        let n_img = cond.c_img.len();

        // projected anchors, when guidance carries keywords
        let anchors_proj = match guidance {
            Some(g) if !g.anchors.is_empty() => {
                let k = g.anchors.len();
                let mut data = Vec::with_capacity(k * self.config.img_dim);
                for a in &g.anchors {
                    if a.len() != self.config.img_dim {
                        return Err(Error::Shape("anchor dim != img_dim".into()));
                    }
                    data.extend_from_slice(a);
                }
                let leaf = tape.leaf(Mat::from_vec(k, self.config.img_dim, data)?);
                Some(tape.matmul(leaf, pnode("cond.p_v")))
            }
            _ => None,
        };

        let concat_mode = self.config.conditioning_mode == ConditioningMode::TokenConcat;
        // token_concat: sequence is [text; image; visual]
        let mut z = if concat_mode {
            let cond_all = tape.concat_rows(text_proj, img_proj);
            tape.concat_rows(cond_all, x)
        } else {
            x
        };
        let cond_all = if concat_mode {
            None
        } else {
            Some(tape.concat_rows(text_proj, img_proj))
        };
        let total_rows = tape.value(z).rows;
        let visual_offset = total_rows - visual_tokens;

        let mut states = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            // attention-cache injection at the entry of a weak layer
            if let Some(g) = guidance {
                if g.lambda_cache != 0.0 && g.weak_layers.contains(&l) {
                    if let (Some(maps), Some(anch)) = (&g.cache_maps, anchors_proj) {
                        for (k, map) in maps.iter().enumerate() {
                            if map.len() != visual_tokens {
                                return Err(Error::Shape("cache map length != token count".into()));
                            }
                            let wv = if concat_mode {
                                pnode(&format!("layer{l}.self.wv"))
                            } else {
                                pnode(&format!("layer{l}.cross.wv"))
                            };
                            let vvis_all = tape.matmul(anch, wv);
                            let vk = tape.slice_rows(vvis_all, k, 1);
                            let mut weights = vec![0.0; total_rows];
                            weights[visual_offset..].copy_from_slice(map);
                            z = tape.add_outer(z, vk, weights, g.lambda_cache);
                        }
                    }
                }
            }

            // self-attention block
            let h = tape.layer_norm_rows(z);
            let wv_self = pnode(&format!("layer{l}.self.wv"));
            let v_self = tape.matmul(h, wv_self);
            let (v_self, self_anchor_values, self_text_values) = if concat_mode {
                // value fusion happens in the (single) attention of this mode
                let anchor_values = anchors_proj.map(|a| tape.matmul(a, wv_self));
                let fused = match (guidance, anchor_values) {
                    (Some(g), Some(av)) if g.lambda_txt != 0.0 && !g.keyword_rows.is_empty() => {
                        tape.scatter_add_rows(v_self, av, g.keyword_rows.clone(), g.lambda_txt)
                    }
                    _ => v_self,
                };
                let tv = tape.slice_rows(fused, 0, n_text);
                (fused, anchor_values, Some(tv))
            } else {
                (v_self, None, None)
            };
            let (o, self_logits) = self.attention(
                tape,
                h,
                h,
                v_self,
                pnode(&format!("layer{l}.self.wq")),
                pnode(&format!("layer{l}.self.wk")),
                pnode(&format!("layer{l}.self.wo")),
            );
            z = tape.add(z, o);

            // cross-attention block (cross mode only)
            let (text_values, anchor_values, logits) = if concat_mode {
                (self_text_values.unwrap(), self_anchor_values, self_logits)
            } else {
                let cond_all = cond_all.unwrap();
                let h2 = tape.layer_norm_rows(z);
                let wv_cross = pnode(&format!("layer{l}.cross.wv"));
                let vc = tape.matmul(cond_all, wv_cross);
                let anchor_values = anchors_proj.map(|a| tape.matmul(a, wv_cross));
                let vc = match (guidance, anchor_values) {
                    (Some(g), Some(av)) if g.lambda_txt != 0.0 && !g.keyword_rows.is_empty() => {
                        tape.scatter_add_rows(vc, av, g.keyword_rows.clone(), g.lambda_txt)
                    }
                    _ => vc,
                };
                let (o2, cross_logits) = self.attention(
                    tape,
                    h2,
                    cond_all,
                    vc,
                    pnode(&format!("layer{l}.cross.wq")),
                    pnode(&format!("layer{l}.cross.wk")),
                    pnode(&format!("layer{l}.cross.wo")),
                );
                z = tape.add(z, o2);
                let tv = tape.slice_rows(vc, 0, n_text);
                (tv, anchor_values, cross_logits)
            };

            // mlp block
            let h3 = tape.layer_norm_rows(z);
            let m1 = tape.matmul(h3, pnode(&format!("layer{l}.mlp.w1")));
            let g1 = tape.gelu(m1);
            let m2 = tape.matmul(g1, pnode(&format!("layer{l}.mlp.w2")));
            z = tape.add(z, m2);

            let visual = if concat_mode {
                tape.slice_rows(z, visual_offset, visual_tokens)
            } else {
                z
            };
            states.push(StateNodes {
                visual,
                text_values,
                anchor_values,
                logits,
            });
        }

        let z_visual = if concat_mode {
            tape.slice_rows(z, visual_offset, visual_tokens)
        } else {
            z
        };
        let zf = tape.layer_norm_rows(z_visual);
        let velocity = tape.matmul(zf, pnode("out.proj"));
        let _ = n_img;
        Ok(Built {
            velocity,
            param_nodes,
            states,
        })
    }

    fn velocity_from_node(&self, tape: &Tape, node: NodeId, z_t: &LatentVideo) -> Result<LatentVideo> {
        let m = tape.value(node);
        LatentVideo::new(Tensor::new(
            vec![z_t.frames, z_t.height, z_t.width, z_t.channels],
            m.data.clone(),
        )?)
    }

    fn extract_states(&self, tape: &Tape, built: &Built, hooks: bool) -> Vec<LayerState> {
        if !hooks {
            return Vec::new();
        }
        built
            .states
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let logits: Vec<&Mat> = s.logits.iter().map(|&n| tape.value(n)).collect();
                let (tq, tk) = (logits[0].rows, logits[0].cols);
                let mut data = Vec::with_capacity(logits.len() * tq * tk);
                for m in &logits {
                    data.extend_from_slice(&m.data);
                }
                let attention_logits =
                    Tensor::new(vec![logits.len(), tq, tk], data).expect("finite logits");
                let anchor_values = match s.anchor_values {
                    Some(n) => tape.value(n).clone(),
                    None => Mat::zeros(0, 0),
                };
                LayerState {
                    layer: l,
                    visual: tape.value(s.visual).clone(),
                    text_values: tape.value(s.text_values).clone(),
                    anchor_values,
                    attention_logits,
                }
            })
            .collect()
    }

    /// Forward evaluation. Returns the predicted velocity and, when
    /// `hooks` is set, one `LayerState` per layer.
    pub fn forward(
        &self,
        z_t: &LatentVideo,
        t: f64,
        cond: &Conditioning,
        guidance: Option<&GuidanceInject>,
        hooks: bool,
    ) -> Result<(LatentVideo, Vec<LayerState>)> {
        let mut tape = Tape::new();
        let built = self.build_graph(&mut tape, z_t, t, cond, guidance)?;
        let velocity = self.velocity_from_node(&tape, built.velocity, z_t)?;
        let states = self.extract_states(&tape, &built, hooks);
        Ok((velocity, states))
    }

    /// Flow-matching loss for one sample (used by the FD oracle and training).
    pub fn sample_loss(&self, sample: &TrainSample) -> Result<f64> {
        let z_t = interpolate(&sample.path, sample.t)?;
        let mut tape = Tape::new();
        let built = self.build_graph(&mut tape, &z_t, sample.t, &sample.cond, sample.guidance.as_ref())?;
        let target = sample.path.target_velocity();
        let target_mat = Mat {
            rows: tape.value(built.velocity).rows,
            cols: tape.value(built.velocity).cols,
            data: target.tensor.data().to_vec(),
        };
        let loss = tape.mse_mean(built.velocity, target_mat);
        Ok(tape.value(loss).data[0])
    }

    /// Gradients of the mean flow-matching loss over a batch, for every parameter.
    pub fn gradients(&self, batch: &[TrainSample]) -> Result<(f64, Vec<Mat>)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut total = 0.0;
        let mut grads: Vec<Mat> = self
            .params
            .iter()
            .map(|p| Mat::zeros(p.rows, p.cols))
            .collect();
        let scale = 1.0 / batch.len() as f64;
        for sample in batch {
            let z_t = interpolate(&sample.path, sample.t)?;
            let mut tape = Tape::new();
            let built =
                self.build_graph(&mut tape, &z_t, sample.t, &sample.cond, sample.guidance.as_ref())?;
            let target = sample.path.target_velocity();
            let target_mat = Mat {
                rows: tape.value(built.velocity).rows,
                cols: tape.value(built.velocity).cols,
                data: target.tensor.data().to_vec(),
            };
            let loss = tape.mse_mean(built.velocity, target_mat);
            total += tape.value(loss).data[0];
            let node_grads = tape.backward(loss);
            for &(pi, node) in &built.param_nodes {
                if let Some(g) = &node_grads[node] {
                    if g.data.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric("non-finite gradient".into()));
                    }
                    grads[pi].add_scaled(g, scale);
                }
            }
        }
        Ok((total * scale, grads))
    }

    /// One plain gradient-descent step on the parameters of the layers in
    /// `trainable_layers`; everything else is bit-unchanged. Returns the
    /// pre-update batch loss.
    pub fn train_step(
        &mut self,
        batch: &[TrainSample],
        trainable_layers: &BTreeSet<usize>,
        lr: f64,
    ) -> Result<f64> {
        if lr < 0.0 {
            return Err(Error::Config("lr must be >= 0".into()));
        }
        for &l in trainable_layers {
            if l >= self.config.layers {
                return Err(Error::Config(format!("layer {l} out of range")));
            }
        }
        let (loss, grads) = self.gradients(batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        if lr == 0.0 || trainable_layers.is_empty() {
            return Ok(loss);
        }
        for (i, name) in self.names.iter().enumerate() {
            if let Some(l) = Self::param_layer(name) {
                if trainable_layers.contains(&l) {
                    self.params[i].add_scaled(&grads[i], -lr);
                }
            }
        }
        Ok(loss)
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("params"))?;
        let manifest = serde_json::json!({
            "config": self.config,
            "params": self.names.iter().enumerate().map(|(i, n)| {
                serde_json::json!({
                    "name": n,
                    "rows": self.params[i].rows,
                    "cols": self.params[i].cols,
                    "file": format!("params/{i:03}.fgt"),
                })
            }).collect::<Vec<_>>(),
        });
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        for (i, p) in self.params.iter().enumerate() {
            let t = Tensor::new(vec![p.rows, p.cols], p.data.clone())?;
            t.save(dir.join(format!("params/{i:03}.fgt")))?;
        }
        Ok(())
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<DitModel> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let config: DitConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut model = DitModel::new(config)?;
        let entries = manifest["params"]
            .as_array()
            .ok_or_else(|| Error::Format("missing params list".into()))?;
        if entries.len() != model.params.len() {
            return Err(Error::Format("param count mismatch".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            let name = e["name"].as_str().unwrap_or_default();
            if name != model.names[i] {
                return Err(Error::Format(format!("param name mismatch at {i}")));
            }
            let file = e["file"].as_str().unwrap_or_default();
            let t = Tensor::load(dir.join(file))?;
            let p = &model.params[i];
            if t.shape() != [p.rows, p.cols] {
                return Err(Error::Format(format!("param shape mismatch for {name}")));
            }
            model.params[i] = Mat::from_vec(p.rows, p.cols, t.data().to_vec())?;
        }
        Ok(model)
    }
}

/// One training sample: a flow path at time t with its conditioning.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub path: FlowPath,
    pub t: f64,
    pub cond: Conditioning,
    pub guidance: Option<GuidanceInject>,
}

/// A model bound to fixed conditioning so it evaluates as v(z, t).
pub struct BoundModel<'a> {
    pub model: &'a DitModel,
    pub cond: &'a Conditioning,
    pub guidance: Option<&'a GuidanceInject>,
}

impl VelocityField for BoundModel<'_> {
    fn velocity(&self, z: &LatentVideo, t: f64) -> Result<LatentVideo> {
        Ok(self
            .model
            .forward(z, t, self.cond, self.guidance, false)?
            .0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Modality;

    pub(crate) fn small_config(mode: ConditioningMode) -> DitConfig {
        DitConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            conditioning_mode: mode,
            channels: 2,
            text_dim: 2,
            img_dim: 2,
            seed: 42,
        }
    }

    pub(crate) fn small_inputs(seed: u64, cfg: &DitConfig) -> (LatentVideo, Conditioning) {
        let mut rng = Rng::new(seed);
        let z = LatentVideo::random_normal(2, 2, 2, cfg.channels, &mut rng).unwrap();
        let z_ref = LatentVideo::random_normal(1, 2, 2, cfg.channels, &mut rng).unwrap();
        let c_text = TokenSequence::new(
            Modality::Text,
            cfg.text_dim,
            (0..3)
                .map(|_| (0..cfg.text_dim).map(|_| rng.normal()).collect())
                .collect(),
        )
        .unwrap();
        let c_img = TokenSequence::new(
            Modality::Image,
            cfg.img_dim,
            (0..4)
                .map(|_| (0..cfg.img_dim).map(|_| rng.normal()).collect())
                .collect(),
        )
        .unwrap();
        (
            z,
            Conditioning {
                c_text,
                c_img,
                z_ref,
            },
        )
    }

    #[test]
    fn zero_out_proj_gives_zero_velocity() {
        for mode in [ConditioningMode::CrossAttention, ConditioningMode::TokenConcat] {
            let cfg = small_config(mode);
            let mut model = DitModel::new(cfg.clone()).unwrap();
            let p = model.param_mut("out.proj");
            for v in p.data.iter_mut() {
                *v = 0.0;
            }
            let (z, cond) = small_inputs(1, &cfg);
            let (vel, _) = model.forward(&z, 0.3, &cond, None, false).unwrap();
            assert!(vel.tensor.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config(ConditioningMode::CrossAttention);
        let a = DitModel::new(cfg.clone()).unwrap();
        let b = DitModel::new(cfg.clone()).unwrap();
        let (z, cond) = small_inputs(2, &cfg);
        let (va, _) = a.forward(&z, 0.7, &cond, None, false).unwrap();
        let (vb, _) = b.forward(&z, 0.7, &cond, None, false).unwrap();
        for (x, y) in va.tensor.data().iter().zip(vb.tensor.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn token_concat_attends_over_all_tokens() {
        let cfg = small_config(ConditioningMode::TokenConcat);
        let model = DitModel::new(cfg.clone()).unwrap();
        let (z, cond) = small_inputs(3, &cfg);
        let (_, states) = model.forward(&z, 0.5, &cond, None, true).unwrap();
        let m = cond.c_text.len();
        let n = cond.c_img.len();
        let p = z.frames * z.height * z.width;
        for s in &states {
            assert_eq!(s.attention_logits.shape(), &[cfg.heads, m + n + p, m + n + p]);
        }
    }

    #[test]
    fn cross_mode_logits_cover_cond_tokens() {
        let cfg = small_config(ConditioningMode::CrossAttention);
        let model = DitModel::new(cfg.clone()).unwrap();
        let (z, cond) = small_inputs(4, &cfg);
        let (_, states) = model.forward(&z, 0.5, &cond, None, true).unwrap();
        let p = z.frames * z.height * z.width;
        let mn = cond.c_text.len() + cond.c_img.len();
        assert_eq!(states.len(), cfg.layers);
        for s in &states {
            assert_eq!(s.attention_logits.shape(), &[cfg.heads, p, mn]);
            assert_eq!(s.visual.rows, p);
            assert_eq!(s.text_values.rows, cond.c_text.len());
        }
    }

    #[test]
    fn hooks_do_not_change_velocity() {
        let cfg = small_config(ConditioningMode::CrossAttention);
        let model = DitModel::new(cfg.clone()).unwrap();
        let (z, cond) = small_inputs(5, &cfg);
        let (v_off, _) = model.forward(&z, 0.2, &cond, None, false).unwrap();
        let (v_on, states) = model.forward(&z, 0.2, &cond, None, true).unwrap();
        assert_eq!(states.len(), cfg.layers);
        for (x, y) in v_off.tensor.data().iter().zip(v_on.tensor.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    fn make_sample(cfg: &DitConfig, seed: u64) -> TrainSample {
        let mut rng = Rng::new(seed);
        let (z0, cond) = small_inputs(seed, cfg);
        let z1 = LatentVideo::random_normal(
            z0.frames,
            z0.height,
            z0.width,
            z0.channels,
            &mut rng,
        )
        .unwrap();
        TrainSample {
            path: FlowPath::new(z0, z1).unwrap(),
            t: 0.4,
            cond,
            guidance: None,
        }
    }

    /// FD oracle: every parameter gradient vs central differences.
    fn fd_check_all_params(mode: ConditioningMode) {
        let cfg = small_config(mode);
        let mut model = DitModel::new(cfg.clone()).unwrap();
        let sample = make_sample(&cfg, 7);
        let (_, grads) = model.gradients(std::slice::from_ref(&sample)).unwrap();
        let eps = 1e-5;
        let names: Vec<String> = model.param_names().to_vec();
        for (pi, name) in names.iter().enumerate() {
            for i in 0..model.param(name).data.len() {
                let orig = model.param(name).data[i];
                model.param_mut(name).data[i] = orig + eps;
                let lp = model.sample_loss(&sample).unwrap();
                model.param_mut(name).data[i] = orig - eps;
                let lm = model.sample_loss(&sample).unwrap();
                model.param_mut(name).data[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads[pi].data[i];
                let denom = fd.abs().max(an.abs()).max(1e-7);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "{name}[{i}]: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_cross() {
        fd_check_all_params(ConditioningMode::CrossAttention);
    }

    #[test]
    fn gradients_match_finite_differences_concat() {
        fd_check_all_params(ConditioningMode::TokenConcat);
    }

    #[test]
    fn empty_mask_and_zero_lr_freeze_params() {
        let cfg = small_config(ConditioningMode::CrossAttention);
        let mut model = DitModel::new(cfg.clone()).unwrap();
        let before: Vec<Mat> = model.names.iter().map(|n| model.param(n).clone()).collect();
        let sample = make_sample(&cfg, 8);
        let l1 = model
            .train_step(std::slice::from_ref(&sample), &BTreeSet::new(), 0.1)
            .unwrap();
        let l2 = model
            .train_step(
                std::slice::from_ref(&sample),
                &BTreeSet::from([0usize]),
                0.0,
            )
            .unwrap();
        assert_eq!(l1, l2);
        for (n, b) in model.names.iter().zip(&before) {
            for (x, y) in model.param(n).data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn masked_training_freezes_other_layers() {
        let cfg = small_config(ConditioningMode::CrossAttention);
        let mut model = DitModel::new(cfg.clone()).unwrap();
        let before: Vec<Mat> = model.names.iter().map(|n| model.param(n).clone()).collect();
        let sample = make_sample(&cfg, 9);
        for _ in 0..5 {
            model
                .train_step(std::slice::from_ref(&sample), &BTreeSet::from([1usize]), 0.05)
                .unwrap();
        }
        let mut layer1_changed = false;
        for (i, n) in model.names.iter().enumerate() {
            let frozen = DitModel::param_layer(n) != Some(1);
            for (x, y) in model.params[i].data.iter().zip(&before[i].data) {
                if frozen {
                    assert_eq!(x.to_bits(), y.to_bits(), "{n} changed");
                } else if x.to_bits() != y.to_bits() {
                    layer1_changed = true;
                }
            }
        }
        assert!(layer1_changed);
    }

    #[test]
    fn one_layer_model_fits_constant_target() {
        // 200 steps of gradient descent on a 1-layer model, seed 42.
        let cfg = DitConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            conditioning_mode: ConditioningMode::CrossAttention,
            channels: 2,
            text_dim: 2,
            img_dim: 2,
            seed: 42,
        };
        let mut model = DitModel::new(cfg.clone()).unwrap();
        let sample = make_sample(&cfg, 42);
        let initial = model.sample_loss(&sample).unwrap();
        let mask = BTreeSet::from([0usize]);
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(model.train_step(std::slice::from_ref(&sample), &mask, 0.2).unwrap());
        }
        let final_loss = model.sample_loss(&sample).unwrap();
        assert!(
            final_loss < 0.1 * initial,
            "final {final_loss} vs initial {initial}"
        );
        for w in losses[10..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "non-monotone after step 10: {w:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_config(ConditioningMode::CrossAttention);
        let model = DitModel::new(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save_checkpoint(dir.path()).unwrap();
        let back = DitModel::load_checkpoint(dir.path()).unwrap();
        let (z, cond) = small_inputs(10, &cfg);
        let (va, _) = model.forward(&z, 0.6, &cond, None, false).unwrap();
        let (vb, _) = back.forward(&z, 0.6, &cond, None, false).unwrap();
        for (x, y) in va.tensor.data().iter().zip(vb.tensor.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = small_config(ConditioningMode::CrossAttention);
        let model = DitModel::new(cfg.clone()).unwrap();
        let (z, mut cond) = small_inputs(11, &cfg);
        cond.c_text = TokenSequence::new(Modality::Text, 3, vec![vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(model.forward(&z, 0.5, &cond, None, false).is_err());
    }
}
