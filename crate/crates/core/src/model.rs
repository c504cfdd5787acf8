//! The recognition network: a patch-token encoder with optional soft
//! conditional prompts, per-clip pooling, a recurrent temporal head and a
//! linear classifier. Multi-agent models ROI-align each agent's box out of
//! the encoder's token grid and classify every agent separately.
//!
//! Parameters live in a flat, ordered list of named tensors. The same order
//! is used for graph registration, optimizer state and checkpoints.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Taps};
use crate::error::{Error, Result};
use crate::prompt::{self, FuseMode, PoolNodes, PromptPool};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// ROI output resolution per side.
pub const ROI_GRID: usize = 5;
/// Tokens are mean-pooled, so position reaches the pooled feature only
/// through the position embedding's interaction with content. At the usual
/// 0.02 the pooled feature is nearly position-blind and motion classes stay
/// at chance for dozens of epochs.
const POS_INIT_STD: f64 = 1.0;

/// Input prompting applied to a run. `Flow` and `Mask` act on pixels before
/// encoding; the `Scp*` modes add a learnable prompt pool to the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    #[default]
    None,
    Flow,
    Mask,
    ScpConcat,
    ScpAdd,
    ScpMul,
}

impl PromptMode {
    pub fn fuse_mode(self) -> Option<FuseMode> {
        match self {
            PromptMode::ScpConcat => Some(FuseMode::Concat),
            PromptMode::ScpAdd => Some(FuseMode::Add),
            PromptMode::ScpMul => Some(FuseMode::Mul),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// One label per video, softmax cross-entropy.
    #[default]
    Single,
    /// One label per agent, per-class binary cross-entropy.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub prompt_mode: PromptMode,
    /// Number of prompt experts `l` (ignored without an SCP mode).
    pub experts: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 4,
            channels: 16,
            depth: 1,
            heads: 2,
            prompt_mode: PromptMode::None,
            experts: prompt::DEFAULT_EXPERTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Clips per video; each contributes one step of the recurrence.
    pub clips: usize,
    pub task: Task,
    /// Agents per video (1 for single-agent).
    pub agents: usize,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.patch_size == 0 || self.height % e.patch_size != 0 || self.width % e.patch_size != 0 {
            return Err(Error::NotDivisible {
                height: self.height,
                width: self.width,
                block: e.patch_size,
            });
        }
        if e.channels == 0 || e.heads == 0 || e.channels % e.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of heads {}",
                e.channels, e.heads
            )));
        }
        if e.prompt_mode.fuse_mode().is_some() && e.experts == 0 {
            return Err(Error::Config("experts must be >= 1".into()));
        }
        if self.classes == 0 || self.clips == 0 || self.agents == 0 {
            return Err(Error::Config("classes, clips and agents must be >= 1".into()));
        }
        if self.task == Task::Single && self.agents != 1 {
            return Err(Error::Config("single-agent task with agents != 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.encoder.patch_size, self.width / self.encoder.patch_size)
    }

    /// Patch tokens per frame.
    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.encoder.patch_size * self.encoder.patch_size * 3
    }
}

/// Cut an `H × W × 3` frame into row-major patches, `S × (p·p·3)`, each
/// flattened as `(dy, dx, channel)`.
pub fn patchify(frame: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w) = match frame.shape() {
        &[h, w, 3] => (h, w),
        s => return Err(Error::InvalidShape(format!("frame must be H x W x 3, got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::NotDivisible { height: h, width: w, block: patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(frame.len());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let row = ((py * patch + dy) * w + px * patch) * 3;
                out.extend_from_slice(&frame.data()[row..row + patch * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * 3], out)
}

/// Model input for `videos` clips of `frames` frames each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(videos·frames) × S × (p·p·3)`
    pub patches: Tensor,
    pub videos: usize,
    pub frames: usize,
    /// `(videos·frames) × A × 4` normalized boxes (multi-agent only).
    pub boxes: Option<Tensor>,
}

/// Normalized `[x0, y0, x1, y1]` box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RoiBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::InvertedBox { x0, y0, x1, y1 });
        }
        Ok(RoiBox { x0, y0, x1, y1 })
    }
}

/// One bilinear sample of a grid: the two bracketing rows and columns and
/// the fractional position between them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearSample {
    pub rows: [usize; 2],
    pub cols: [usize; 2],
    pub fy: f64,
    pub fx: f64,
}

/// Bracketing cells for a continuous coordinate on an axis of `n` cells
/// whose centers sit at `i + 0.5`; out-of-range positions clamp to the edge.
fn bracket(coord: f64, n: usize) -> ([usize; 2], f64) {
    let u = (coord - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = u.floor() as usize;
    ([i0, (i0 + 1).min(n - 1)], u - i0 as f64)
}

/// Samples at the centers of a `ROI_GRID × ROI_GRID` partition of `roi`
/// over a `gh × gw` grid, row-major.
pub fn roi_samples(gh: usize, gw: usize, roi: RoiBox) -> Vec<BilinearSample> {
    let (bh, bw) = ((roi.y1 - roi.y0) * gh as f64, (roi.x1 - roi.x0) * gw as f64);
    let mut out = Vec::with_capacity(ROI_GRID * ROI_GRID);
    for i in 0..ROI_GRID {
        let (rows, fy) = bracket(roi.y0 * gh as f64 + (i as f64 + 0.5) * bh / ROI_GRID as f64, gh);
        for j in 0..ROI_GRID {
            let (cols, fx) = bracket(roi.x0 * gw as f64 + (j as f64 + 0.5) * bw / ROI_GRID as f64, gw);
            out.push(BilinearSample { rows, cols, fy, fx });
        }
    }
    out
}

/// Bilinear sampling on a graph node viewed as rows of `C` channels. Each
/// sample reads grid rows `offset + y·gw + x`. Interpolation is a lerp of
/// lerps, so a constant grid is reproduced exactly.
pub fn bilinear_graph(g: &mut Graph, x: NodeId, gw: usize, samples: &[(usize, BilinearSample)]) -> Result<NodeId> {
    let c = *g.shape(x).last().expect("non-scalar input");
    let corner = |dy: usize, dx: usize| -> Taps {
        samples
            .iter()
            .map(|(off, s)| vec![(off + s.rows[dy] * gw + s.cols[dx], 1.0)])
            .collect()
    };
    let frac = |f: fn(&BilinearSample) -> f64| {
        let data = samples.iter().flat_map(|(_, s)| std::iter::repeat_n(f(s), c)).collect();
        Tensor::new(vec![samples.len(), c], data)
    };
    let fx = g.input(frac(|s| s.fx)?);
    let fy = g.input(frac(|s| s.fy)?);
    let lerp = |g: &mut Graph, a: NodeId, b: NodeId, t: NodeId| -> Result<NodeId> {
        let d = g.sub(b, a)?;
        let d = g.mul(d, t)?;
        g.add(a, d)
    };
    let v00 = g.gather_rows(x, corner(0, 0))?;
    let v01 = g.gather_rows(x, corner(0, 1))?;
    let v10 = g.gather_rows(x, corner(1, 0))?;
    let v11 = g.gather_rows(x, corner(1, 1))?;
    let top = lerp(g, v00, v01, fx)?;
    let bottom = lerp(g, v10, v11, fx)?;
    lerp(g, top, bottom, fy)
}

/// ROI-align a `Hg × Wg × C` feature grid to `5 × 5 × C`.
pub fn roi_align(grid: &Tensor, roi: RoiBox) -> Result<Tensor> {
    let &[gh, gw, c] = grid.shape() else {
        return Err(Error::InvalidShape(format!("feature grid must be H x W x C, got {:?}", grid.shape())));
    };
    if gh < 2 || gw < 2 {
        return Err(Error::InvalidShape(format!("feature grid {gh}x{gw} is smaller than 2x2")));
    }
    let samples: Vec<_> = roi_samples(gh, gw, roi).into_iter().map(|s| (0, s)).collect();
    let mut g = Graph::new();
    let x = g.input(grid.clone());
    let out = bilinear_graph(&mut g, x, gw, &samples)?;
    g.forward()?;
    g.value(out)?.reshape(&[ROI_GRID, ROI_GRID, c])
}

fn cell(g: &mut Graph, z: NodeId, w: NodeId, b: NodeId, nl: Nonlinearity) -> Result<NodeId> {
    let a = g.affine(z, w, b)?;
    Ok(match nl {
        Nonlinearity::Tanh => g.tanh(a),
        Nonlinearity::Identity => a,
    })
}

/// `h₁ = f(x₁)`, `hᵢ₊₁ = f(hᵢ + xᵢ₊₁)` with `f(z) = nl(z·W + b)`; returns
/// the final state. Steps may carry any leading batch axes.
pub fn ar_reason_graph(
    g: &mut Graph,
    steps: &[NodeId],
    weight: NodeId,
    bias: NodeId,
    nl: Nonlinearity,
) -> Result<NodeId> {
    let (&first, rest) = steps.split_first().ok_or(Error::EmptySequence)?;
    let mut h = cell(g, first, weight, bias, nl)?;
    for &x in rest {
        let z = g.add(h, x)?;
        h = cell(g, z, weight, bias, nl)?;
    }
    Ok(h)
}

/// Recurrent head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ArHead {
    /// `C × C`
    pub weight: Tensor,
    /// `C`
    pub bias: Tensor,
    pub nonlinearity: Nonlinearity,
}

impl ArHead {
    pub fn identity(channels: usize) -> Self {
        let mut weight = Tensor::zeros(&[channels, channels]);
        for i in 0..channels {
            weight.set(&[i, i], 1.0);
        }
        ArHead {
            weight,
            bias: Tensor::zeros(&[channels]),
            nonlinearity: Nonlinearity::Identity,
        }
    }

    /// Fold a sequence of `C` features into the final state.
    pub fn reason(&self, sequence: &[Tensor]) -> Result<Tensor> {
        if sequence.is_empty() {
            return Err(Error::EmptySequence);
        }
        let c = self.weight.shape()[0];
        if self.weight.shape() != [c, c] || self.bias.shape() != [c] {
            return Err(Error::InvalidShape(format!(
                "recurrent cell needs C x C weight and C bias, got {:?} and {:?}",
                self.weight.shape(),
                self.bias.shape()
            )));
        }
        let mut g = Graph::new();
        let w = g.input(self.weight.clone());
        let b = g.input(self.bias.clone());
        let steps: Vec<NodeId> = sequence.iter().map(|x| g.input(x.clone())).collect();
        let h = ar_reason_graph(&mut g, &steps, w, b, self.nonlinearity)?;
        g.forward()?;
        Ok(g.value(h)?.clone())
    }
}

/// `state · W + b`.
pub fn classify(state: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, w, b) = (g.input(state.clone()), g.input(weight.clone()), g.input(bias.clone()));
    let y = g.affine(x, w, b)?;
    g.forward()?;
    Ok(g.value(y)?.clone())
}

/// A named, ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

/// Graph handles of all parameters, in registration order.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl ParamNodes {
    fn get(&self, name: &str) -> NodeId {
        self.ids[self.index[name]]
    }
}

/// Graph outputs of [`Model::build`].
#[derive(Clone, Debug)]
pub struct Built {
    pub params: ParamNodes,
    /// `N × classes` (single) or `N × A × classes` (multi).
    pub logits: NodeId,
}

fn name_hash(name: &str) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(name.as_bytes());
    h.finish()
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Names, shapes and initializers of every parameter, in canonical order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let e = &config.encoder;
    let (c, s, p, n) = (e.channels, config.tokens(), config.patch_dim(), config.classes);
    let inv_sqrt = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut v: Vec<(String, Vec<usize>, Init)> = vec![
        ("patch.weight".into(), vec![p, c], inv_sqrt(p)),
        ("patch.bias".into(), vec![c], Init::Zeros),
        ("pos".into(), vec![s, c], Init::Normal(POS_INIT_STD)),
    ];
    if e.prompt_mode.fuse_mode().is_some() {
        let l = e.experts;
        v.push(("pool.experts".into(), vec![l, s, c], Init::Normal(prompt::INIT_STD)));
        v.push(("pool.gate_weight".into(), vec![c, l], Init::Normal(prompt::INIT_STD)));
        v.push(("pool.gate_bias".into(), vec![l], Init::Zeros));
    }
    for i in 0..e.depth {
        let b = format!("block{i}");
        v.push((format!("{b}.ln1.gain"), vec![c], Init::Ones));
        v.push((format!("{b}.ln1.bias"), vec![c], Init::Zeros));
        for m in ["q", "k", "v", "o"] {
            v.push((format!("{b}.attn.{m}.weight"), vec![c, c], inv_sqrt(c)));
            // A key bias only shifts every score of a query by the same
            // amount, which the softmax cancels; it is left out.
            if m != "k" {
                v.push((format!("{b}.attn.{m}.bias"), vec![c], Init::Zeros));
            }
        }
        v.push((format!("{b}.ln2.gain"), vec![c], Init::Ones));
        v.push((format!("{b}.ln2.bias"), vec![c], Init::Zeros));
        v.push((format!("{b}.mlp.fc1.weight"), vec![c, 2 * c], inv_sqrt(c)));
        v.push((format!("{b}.mlp.fc1.bias"), vec![2 * c], Init::Zeros));
        v.push((format!("{b}.mlp.fc2.weight"), vec![2 * c, c], inv_sqrt(2 * c)));
        v.push((format!("{b}.mlp.fc2.bias"), vec![c], Init::Zeros));
    }
    if config.task == Task::Multi {
        let f = ROI_GRID * ROI_GRID * c;
        v.push(("roi.weight".into(), vec![f, c], inv_sqrt(f)));
        v.push(("roi.bias".into(), vec![c], Init::Zeros));
    }
    v.push(("ar.weight".into(), vec![c, c], inv_sqrt(c)));
    v.push(("ar.bias".into(), vec![c], Init::Zeros));
    v.push(("head.weight".into(), vec![c, n], inv_sqrt(c)));
    v.push(("head.bias".into(), vec![n], Init::Zeros));
    v
}

impl Model {
    /// Fresh parameters. Each tensor draws from its own child stream keyed
    /// by name, so shared parts initialize identically across prompt modes.
    pub fn init(config: ModelConfig, rng: &RngStream) -> Result<Model> {
        config.validate()?;
        let params = layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::ones(&shape),
                    Init::Normal(std) => Tensor::randn(&shape, std, &mut rng.split(name_hash(&name))),
                };
                (name, t)
            })
            .collect();
        Model::from_params(config, params)
    }

    /// Assemble a model from an existing parameter list, checking that the
    /// names and shapes are exactly those [`Model::init`] would produce.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Model> {
        config.validate()?;
        let expected = layout(&config);
        let matches = expected.len() == params.len()
            && expected
                .iter()
                .zip(&params)
                .all(|((en, es, _), (n, t))| en == n && es.as_slice() == t.shape());
        if !matches {
            return Err(Error::Config(format!(
                "parameter list ({} tensors) does not match the model configuration ({} tensors)",
                params.len(),
                expected.len()
            )));
        }
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Ok(Model { config, params, index })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        if self.params[i].1.shape() != value.shape() {
            return Err(Error::InvalidShape(format!(
                "{name}: expected {:?}, got {:?}",
                self.params[i].1.shape(),
                value.shape()
            )));
        }
        self.params[i].1 = value;
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn prompt_pool(&self) -> Option<PromptPool> {
        Some(PromptPool {
            experts: self.param("pool.experts")?.clone(),
            gate_weight: self.param("pool.gate_weight")?.clone(),
            gate_bias: self.param("pool.gate_bias")?.clone(),
        })
    }

    pub fn register(&self, g: &mut Graph) -> ParamNodes {
        ParamNodes {
            ids: self.params.iter().map(|(_, t)| g.param(t.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Encoder on `B × S × P` patches: embedding, prompt fusion and the
    /// attention blocks. Returns `B × S' × C` tokens (`S' = 2S` with
    /// concatenated prompts, the prompt tokens following the grid tokens).
    pub fn encode(&self, g: &mut Graph, p: &ParamNodes, patches: NodeId) -> Result<NodeId> {
        let e = &self.config.encoder;
        let ps = g.shape(patches).to_vec();
        let (s, pd) = (self.config.tokens(), self.config.patch_dim());
        if ps.len() != 3 || ps[1] != s || ps[2] != pd {
            return Err(Error::InvalidShape(format!("patches must be B x {s} x {pd}, got {ps:?}")));
        }
        let b = ps[0];
        let tokens = g.affine(patches, p.get("patch.weight"), p.get("patch.bias"))?;
        let pos = g.broadcast(p.get("pos"), &[b])?;
        let mut x = g.add(tokens, pos)?;

        if let Some(mode) = e.prompt_mode.fuse_mode() {
            let pool = PoolNodes {
                experts: p.get("pool.experts"),
                gate_weight: p.get("pool.gate_weight"),
                gate_bias: p.get("pool.gate_bias"),
            };
            let w = prompt::gate(g, &pool, x)?;
            let prompt = prompt::synthesize(g, &pool, w)?;
            x = prompt::fuse(g, x, prompt, mode)?;
        }

        for i in 0..e.depth {
            x = self.block(g, p, &format!("block{i}"), x)?;
        }
        Ok(x)
    }

    fn block(&self, g: &mut Graph, p: &ParamNodes, name: &str, x: NodeId) -> Result<NodeId> {
        let e = &self.config.encoder;
        let s = g.shape(x).to_vec();
        let (b, n, c) = (s[0], s[1], s[2]);
        let (heads, d) = (e.heads, e.channels / e.heads);
        let param = |k: &str| p.get(&format!("{name}.{k}"));

        let h = g.layer_norm(x, param("ln1.gain"), param("ln1.bias"))?;
        let split = |g: &mut Graph, m: &str| -> Result<NodeId> {
            let w = param(&format!("attn.{m}.weight"));
            let y = match m {
                "k" => g.matmul(h, w)?,
                _ => g.affine(h, w, param(&format!("attn.{m}.bias")))?,
            };
            let y = g.reshape(y, &[b, n, heads, d])?;
            g.permute(y, &[0, 2, 1, 3])
        };
        let q = split(g, "q")?;
        let k = split(g, "k")?;
        let v = split(g, "v")?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, c])?;
        let out = g.affine(ctx, param("attn.o.weight"), param("attn.o.bias"))?;
        let x = g.add(x, out)?;

        let h = g.layer_norm(x, param("ln2.gain"), param("ln2.bias"))?;
        let h = g.affine(h, param("mlp.fc1.weight"), param("mlp.fc1.bias"))?;
        let h = g.relu(h);
        let h = g.affine(h, param("mlp.fc2.weight"), param("mlp.fc2.bias"))?;
        g.add(x, h)
    }

    /// Record the full forward pass for a batch.
    pub fn build(&self, g: &mut Graph, batch: &Batch) -> Result<Built> {
        let cfg = &self.config;
        let (n, t, m) = (batch.videos, batch.frames, cfg.clips);
        if t == 0 || t % m != 0 {
            return Err(Error::InvalidArgument(format!("{t} frames cannot be split into {m} clips")));
        }
        if batch.patches.shape().first() != Some(&(n * t)) {
            return Err(Error::InvalidShape(format!(
                "expected {} frames of patches, got {:?}",
                n * t,
                batch.patches.shape()
            )));
        }
        let k = t / m;
        let c = cfg.encoder.channels;
        let params = self.register(g);
        let patches = g.input(batch.patches.clone());
        let x = self.encode(g, &params, patches)?;

        let (ar_w, ar_b) = (params.get("ar.weight"), params.get("ar.bias"));
        let logits = match cfg.task {
            Task::Single => {
                let pooled = g.mean(x, 1)?;
                let pooled = g.reshape(pooled, &[n, m, k, c])?;
                let per_clip = g.mean(pooled, 2)?;
                let mut steps = Vec::with_capacity(m);
                for i in 0..m {
                    let s = g.slice(per_clip, 1, i, 1)?;
                    steps.push(g.reshape(s, &[n, c])?);
                }
                let h = ar_reason_graph(g, &steps, ar_w, ar_b, cfg.nonlinearity)?;
                g.affine(h, params.get("head.weight"), params.get("head.bias"))?
            }
            Task::Multi => {
                let a = cfg.agents;
                let boxes = batch
                    .boxes
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("multi-agent batch without boxes".into()))?;
                if boxes.shape() != [n * t, a, 4] {
                    return Err(Error::InvalidShape(format!(
                        "boxes must be {} x {a} x 4, got {:?}",
                        n * t,
                        boxes.shape()
                    )));
                }
                let (gh, gw) = cfg.grid();
                let stride = g.shape(x)[1];
                let mut samples = Vec::with_capacity(n * t * a * ROI_GRID * ROI_GRID);
                for (f, bx) in boxes.data().chunks_exact(4).enumerate() {
                    let roi = RoiBox::new(bx[0], bx[1], bx[2], bx[3])?;
                    let offset = (f / a) * stride;
                    samples.extend(roi_samples(gh, gw, roi).into_iter().map(|s| (offset, s)));
                }
                let rois = bilinear_graph(g, x, gw, &samples)?;
                let rois = g.reshape(rois, &[n * t, a, ROI_GRID * ROI_GRID * c])?;
                let feats = g.affine(rois, params.get("roi.weight"), params.get("roi.bias"))?;
                let feats = g.reshape(feats, &[n, m, k, a, c])?;
                let per_clip = g.mean(feats, 2)?;
                let mut steps = Vec::with_capacity(m);
                for i in 0..m {
                    let s = g.slice(per_clip, 1, i, 1)?;
                    steps.push(g.reshape(s, &[n, a, c])?);
                }
                let h = ar_reason_graph(g, &steps, ar_w, ar_b, cfg.nonlinearity)?;
                g.affine(h, params.get("head.weight"), params.get("head.bias"))?
            }
        };
        Ok(Built { params, logits })
    }

    /// Evaluate logits without recording gradients.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let built = self.build(&mut g, batch)?;
        g.forward()?;
        Ok(g.value(built.logits)?.clone())
    }

    /// Encode one `H × W × 3` frame to `S' × C` tokens.
    pub fn encode_frame(&self, frame: &Tensor) -> Result<Tensor> {
        let patches = patchify(frame, self.config.encoder.patch_size)?;
        let (s, p) = (patches.shape()[0], patches.shape()[1]);
        if s != self.config.tokens() {
            return Err(Error::InvalidShape(format!(
                "frame {:?} does not match configured {}x{}",
                frame.shape(),
                self.config.height,
                self.config.width
            )));
        }
        self.encode_patches(&patches.reshape(&[1, s, p])?)
            .and_then(|t| {
                let (n, c) = (t.shape()[1], t.shape()[2]);
                t.reshape(&[n, c])
            })
    }

    /// Encoder output for `B × S × P` patches.
    pub fn encode_patches(&self, patches: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.register(&mut g);
        let x = g.input(patches.clone());
        let y = self.encode(&mut g, &params, x)?;
        g.forward()?;
        Ok(g.value(y)?.clone())
    }
}

#[cfg(test)]
mod tests;
