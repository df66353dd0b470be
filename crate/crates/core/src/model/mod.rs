//! Grain stem → {attention stream, CNN stream} → fusion head.

mod config;
mod params;

pub use config::ModelConfig;
pub use params::{init_params, relative_table_len, ParamEntry, ParamRole, ParamStore, INIT_STD};

use std::collections::HashMap;

use crate::error::{config_err, Result};
use crate::graph::{BatchNormOptions, Graph, NormMode, RunningStats, Var, LAYER_NORM_EPS};
use crate::tensor::Tensor;

/// One forward pass over a [`ParamStore`].
///
/// Parameters are bound into the graph lazily on first use. Batch-norm
/// running statistics updated in train mode are held here until
/// [`ForwardCtx::finish`] hands them back, so the store itself stays
/// borrowed immutably for the whole pass.
pub struct ForwardCtx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    mode: NormMode,
    track_grads: bool,
    bound: HashMap<String, Var>,
    order: Vec<String>,
    running: Vec<(String, RunningStats)>,
    bn_opts: BatchNormOptions,
}

/// What a finished pass leaves behind for the store.
#[derive(Debug, Default)]
pub struct PassOutcome {
    pub grads: Vec<(String, Vec<f64>)>,
    pub running: Vec<(String, RunningStats)>,
}

impl PassOutcome {
    pub fn apply(self, store: &mut ParamStore) -> Result<()> {
        store.accumulate_grads(self.grads)?;
        for (prefix, stats) in &self.running {
            store.set_running_stats(prefix, stats)?;
        }
        Ok(())
    }
}

impl<'a> ForwardCtx<'a> {
    /// A pass whose trainable parameters receive gradients.
    pub fn new(store: &'a ParamStore, mode: NormMode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            track_grads: true,
            bound: HashMap::new(),
            order: Vec::new(),
            running: Vec::new(),
            bn_opts: BatchNormOptions::default(),
        }
    }

    /// A pass with every parameter bound as a constant.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::without_grads(store, NormMode::Eval)
    }

    pub fn without_grads(store: &'a ParamStore, mode: NormMode) -> Self {
        Self { track_grads: false, ..Self::new(store, mode) }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self.store.get(name)?;
        let mut t = entry.tensor.clone();
        t.grad = None;
        let v = if self.track_grads && entry.role.trainable() {
            self.graph.variable(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mut stats = match self.running.iter().find(|(p, _)| p == prefix) {
            Some((_, s)) => s.clone(),
            None => self.store.running_stats(prefix)?,
        };
        let y = self.graph.batch_norm(x, gamma, beta, &mut stats, self.mode, self.bn_opts)?;
        if self.mode == NormMode::Train {
            match self.running.iter_mut().find(|(p, _)| p == prefix) {
                Some((_, s)) => *s = stats,
                None => self.running.push((prefix.to_string(), stats)),
            }
        }
        Ok(y)
    }

    /// Collects parameter gradients (after `graph.backward`) and pending
    /// running-stat updates.
    pub fn finish(mut self) -> PassOutcome {
        let mut grads = Vec::new();
        for name in &self.order {
            if let Some(g) = self.graph.take_grad(self.bound[name]) {
                grads.push((name.clone(), g));
            }
        }
        PassOutcome { grads, running: self.running }
    }
}

fn dims4(g: &Graph, x: Var) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => config_err(format!("expected an [N,C,H,W] tensor, got {s:?}")),
    }
}

/// `[N,C,H,W]` → `[N,H·W,C]`.
fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let [n, c, h, w] = dims4(g, x)?;
    let t = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(t, &[n, h * w, c])
}

/// `[N,H·W,C]` → `[N,C,H,W]`.
fn from_tokens(g: &mut Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let (n, c) = (g.shape(t)[0], g.shape(t)[2]);
    let m = g.reshape(t, &[n, h, w, c])?;
    g.permute(m, &[0, 3, 1, 2])
}

fn conv(ctx: &mut ForwardCtx, prefix: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    ctx.graph.conv2d(x, w, Some(b), stride, padding)
}

fn linear(ctx: &mut ForwardCtx, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    ctx.graph.linear(x, w, Some(b))
}

fn layer_norm(ctx: &mut ForwardCtx, prefix: &str, x: Var) -> Result<Var> {
    let gamma = ctx.param(&format!("{prefix}.gamma"))?;
    let beta = ctx.param(&format!("{prefix}.beta"))?;
    ctx.graph.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// Convolutional stem: stride-2 3×3 conv to `stem_channels`, two stride-1
/// 3×3 convs (GELU after each), then a 2×2 stride-2 patch-aggregation conv
/// to `embed_dim` followed by a per-site layer norm over channels.
pub fn grain_forward(ctx: &mut ForwardCtx, cfg: &ModelConfig, images: Var) -> Result<Var> {
    let [_, c, h, w] = dims4(&ctx.graph, images)?;
    if c != cfg.in_channels {
        return config_err(format!("expected {} input channels, got {c}", cfg.in_channels));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return config_err(format!("input extent {h}x{w} is not divisible by 4"));
    }
    let mut x = images;
    for (name, stride) in [("grain.conv1", 2), ("grain.conv2", 1), ("grain.conv3", 1)] {
        x = conv(ctx, name, x, stride, 1)?;
        x = ctx.graph.gelu(x)?;
    }
    let x = conv(ctx, "grain.agg", x, 2, 0)?;
    let [_, _, gh, gw] = dims4(&ctx.graph, x)?;
    let t = to_tokens(&mut ctx.graph, x)?;
    let t = layer_norm(ctx, "grain.norm", t)?;
    from_tokens(&mut ctx.graph, t, gh, gw)
}

/// Local perception unit: `x + dwconv3x3(x)`, a conditional position
/// encoding.
pub fn lpu_forward(ctx: &mut ForwardCtx, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let y = ctx.graph.depthwise_conv2d(x, w, 1, 1)?;
    ctx.graph.add(x, y)
}

/// Table index for every (query, key) pair on an `h×w` query grid whose
/// keys were pooled by `r`. A key cell is placed at its top-left query
/// coordinate; the offset `(dy, dx)` maps to `(dy+h-1)·(2w-1) + dx+w-1`.
pub fn relative_bias_index(h: usize, w: usize, r: usize) -> Vec<usize> {
    let (kh, kw) = (h / r, w / r);
    let mut index = Vec::with_capacity(h * w * kh * kw);
    for qi in 0..h {
        for qj in 0..w {
            for ki in 0..kh {
                for kj in 0..kw {
                    let dy = qi + h - 1 - ki * r;
                    let dx = qj + w - 1 - kj * r;
                    index.push(dy * (2 * w - 1) + dx);
                }
            }
        }
    }
    index
}

/// Output of [`lmhsa_forward_traced`].
#[derive(Clone, Copy, Debug)]
pub struct LmhsaOutput {
    pub output: Var,
    /// Attention weights, `[N, heads, L, L/r²]`.
    pub attention: Var,
}

/// Lightweight multi-head self-attention with a residual connection.
pub fn lmhsa_forward(ctx: &mut ForwardCtx, prefix: &str, x: Var, num_heads: usize, r: usize) -> Result<Var> {
    Ok(lmhsa_forward_traced(ctx, prefix, x, num_heads, r)?.output)
}

/// Pre-norm attention where queries come from every site and keys/values
/// from an `r×r` stride-`r` depthwise-pooled map, with a learned relative
/// position bias added to the scaled scores.
pub fn lmhsa_forward_traced(
    ctx: &mut ForwardCtx,
    prefix: &str,
    x: Var,
    num_heads: usize,
    r: usize,
) -> Result<LmhsaOutput> {
    let [n, c, h, w] = dims4(&ctx.graph, x)?;
    if num_heads == 0 || c % num_heads != 0 {
        return config_err(format!("{c} channels cannot be split into {num_heads} heads"));
    }
    if r == 0 || h % r != 0 || w % r != 0 {
        return config_err(format!("feature map {h}x{w} is not divisible by reduction {r}"));
    }
    let (l, dk) = (h * w, c / num_heads);
    let (kh, kw) = (h / r, w / r);
    let lk = kh * kw;

    let tokens = to_tokens(&mut ctx.graph, x)?;
    let normed = layer_norm(ctx, &format!("{prefix}.norm"), tokens)?;
    let q = linear(ctx, &format!("{prefix}.q"), normed)?;
    let kv_src = if r > 1 {
        let map = from_tokens(&mut ctx.graph, normed, h, w)?;
        let wr = ctx.param(&format!("{prefix}.reduce.weight"))?;
        let pooled = ctx.graph.depthwise_conv2d(map, wr, r, 0)?;
        to_tokens(&mut ctx.graph, pooled)?
    } else {
        normed
    };
    let k = linear(ctx, &format!("{prefix}.k"), kv_src)?;
    let v = linear(ctx, &format!("{prefix}.v"), kv_src)?;

    let g = &mut ctx.graph;
    let split = |g: &mut Graph, t: Var, len: usize| -> Result<Var> {
        let t = g.reshape(t, &[n, len, num_heads, dk])?;
        g.permute(t, &[0, 2, 1, 3])
    };
    let q = split(g, q, l)?;
    let k = split(g, k, lk)?;
    let v = split(g, v, lk)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;

    let table = ctx.param(&format!("{prefix}.rel_bias"))?;
    let table_len = ctx.graph.shape(table)[1];
    if ctx.graph.shape(table)[0] != num_heads || table_len != relative_table_len(h, w) {
        return config_err(format!(
            "relative-bias table {:?} does not fit {num_heads} heads on a {h}x{w} grid",
            ctx.graph.shape(table)
        ));
    }
    let g = &mut ctx.graph;
    let bias = g.gather(table, &relative_bias_index(h, w, r), &[l, lk])?;
    let scores = g.add(scores, bias)?;
    let attention = g.softmax(scores, 3)?;
    let o = g.matmul(attention, v)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[n, l, c])?;
    let o = linear(ctx, &format!("{prefix}.out"), o)?;
    let o = from_tokens(&mut ctx.graph, o, h, w)?;
    let output = ctx.graph.add(x, o)?;
    Ok(LmhsaOutput { output, attention })
}

/// Pointwise feed-forward block: 1×1 conv expand, GELU, 1×1 conv project,
/// residual add.
pub fn mlp_conv_forward(ctx: &mut ForwardCtx, prefix: &str, x: Var) -> Result<Var> {
    let y = conv(ctx, &format!("{prefix}.fc1"), x, 1, 0)?;
    let y = ctx.graph.gelu(y)?;
    let y = conv(ctx, &format!("{prefix}.fc2"), y, 1, 0)?;
    ctx.graph.add(x, y)
}

pub fn attention_stream_forward(ctx: &mut ForwardCtx, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let mut x = x;
    for b in 0..cfg.num_lmhsa_blocks {
        let p = format!("attn.{b}");
        x = lpu_forward(ctx, &format!("{p}.lpu"), x)?;
        x = lmhsa_forward(ctx, &p, x, cfg.num_heads, cfg.kv_reduction)?;
        x = mlp_conv_forward(ctx, &format!("{p}.mlp"), x)?;
    }
    Ok(x)
}

/// Stacked `[3×3 conv → GELU → batch norm]` blocks.
pub fn cnn_stream_forward(ctx: &mut ForwardCtx, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let mut x = x;
    for j in 0..cfg.cnn_channels.len() {
        x = conv(ctx, &format!("cnn.{j}.conv"), x, 1, 1)?;
        x = ctx.graph.gelu(x)?;
        x = ctx.batch_norm(&format!("cnn.{j}.bn"), x)?;
    }
    Ok(x)
}

fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let [n, c, h, w] = dims4(g, x)?;
    let flat = g.reshape(x, &[n, c, h * w])?;
    g.mean(flat, 2)
}

/// Pools both streams, concatenates channels, and applies the
/// expand-by-`ffn_expansion` two-layer head.
pub fn fuse_and_classify(ctx: &mut ForwardCtx, attn_feat: Var, cnn_feat: Var) -> Result<Var> {
    let a = global_avg_pool(&mut ctx.graph, attn_feat)?;
    let c = global_avg_pool(&mut ctx.graph, cnn_feat)?;
    let fused = ctx.graph.concat(&[a, c], 1)?;
    classify_pooled(ctx, fused)
}

/// Head applied to already-pooled `[N, d]` features.
pub fn classify_pooled(ctx: &mut ForwardCtx, fused: Var) -> Result<Var> {
    let y = linear(ctx, "head.fc1", fused)?;
    let y = ctx.graph.gelu(y)?;
    linear(ctx, "head.fc2", y)
}

/// Feature maps produced on the way to the logits.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub grain: Var,
    pub attention_stream: Var,
    pub cnn_stream: Var,
    pub logits: Var,
}

pub fn model_forward_traced(ctx: &mut ForwardCtx, cfg: &ModelConfig, images: Var) -> Result<ForwardTrace> {
    let grain = grain_forward(ctx, cfg, images)?;
    let attention_stream = attention_stream_forward(ctx, cfg, grain)?;
    let cnn_stream = cnn_stream_forward(ctx, cfg, grain)?;
    let logits = fuse_and_classify(ctx, attention_stream, cnn_stream)?;
    Ok(ForwardTrace { grain, attention_stream, cnn_stream, logits })
}

pub fn model_forward(ctx: &mut ForwardCtx, cfg: &ModelConfig, images: Var) -> Result<Var> {
    Ok(model_forward_traced(ctx, cfg, images)?.logits)
}

/// Largest batch [`Model::logits`] pushes through one graph.
pub const INFERENCE_CHUNK: usize = 8;

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Result of [`Model::train_step_grads`].
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub logits: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self { config, params })
    }

    /// Eval-mode logits, `[N, num_classes]`.
    ///
    /// Samples are independent in eval mode, so the batch is run
    /// [`INFERENCE_CHUNK`] images at a time to bound the size of the tape.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] == 0 {
            return config_err(format!("logits expects a non-empty [N, C, H, W] batch, got {shape:?}"));
        }
        let n = shape[0];
        let per_sample = images.numel() / n;
        let mut out = Vec::with_capacity(n * self.config.num_classes);
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let mut chunk_shape = shape.to_vec();
            chunk_shape[0] = end - start;
            let chunk = Tensor::new(chunk_shape, images.data()[start * per_sample..end * per_sample].to_vec())?;
            let mut ctx = ForwardCtx::inference(&self.params);
            let x = ctx.input(chunk);
            let logits = model_forward(&mut ctx, &self.config, x)?;
            out.extend_from_slice(ctx.graph.value(logits).data());
        }
        Tensor::new([n, self.config.num_classes], out)
    }

    /// Forward in `mode`, cross-entropy, backward; gradients accumulate into
    /// the store and, in train mode, running statistics advance.
    pub fn train_step_grads(&mut self, images: &Tensor, labels: &[usize], mode: NormMode) -> Result<StepOutput> {
        let mut ctx = ForwardCtx::new(&self.params, mode);
        let x = ctx.input(images.clone());
        let logits = model_forward(&mut ctx, &self.config, x)?;
        let loss = ctx.graph.cross_entropy(logits, labels)?;
        ctx.graph.backward(loss)?;
        let out = StepOutput { loss: ctx.graph.value(loss).item(), logits: ctx.graph.value(logits).clone() };
        ctx.finish().apply(&mut self.params)?;
        Ok(out)
    }
}
