//! Two-branch ECG classifier.
//!
//! The signal branch embeds fixed-length patches of the time series and runs
//! a post-norm transformer encoder over them; its mean-pooled output is the
//! latent vector. The spectrogram branch runs residual convolution blocks and
//! axial-attention blocks whose batch normalisations are conditioned on that
//! latent. The two `d_model` vectors are summed and fed to a softmax head.

pub mod graph;
mod io;
mod train;

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::preprocess::{PreprocessConfig, Spectrogram};
use crate::rng::SplitMix64;
use crate::types::{Label, Mode, ProbVector};
use graph::{AttnLayout, BatchStats, Graph, Tensor, Var, PROB_FLOOR};

pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC};
pub use train::{train, train_with, Adam, Balance, EpochMetrics, TrainConfig, TrainOutcome};

/// Records per graph in [`DualNetModel::predict`]. Larger graphs allocate
/// big short-lived buffers and end up slower per record.
const PREDICT_CHUNK: usize = 1;

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_transformer_blocks: usize,
    pub ffn_mult: usize,
    /// Samples per transformer token.
    pub patch_len: usize,
    /// Output channels of each residual block.
    pub spec_channels: Vec<usize>,
    pub axial_blocks: usize,
    pub axial_channels: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
    /// Expected signal length.
    pub input_len: usize,
    /// Expected spectrogram shape.
    pub spec_frames: usize,
    pub spec_bins: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (spec_frames, spec_bins) = PreprocessConfig::default().spectrogram_shape();
        Self {
            d_model: 64,
            n_heads: 2,
            n_transformer_blocks: 2,
            ffn_mult: 2,
            patch_len: 50,
            spec_channels: vec![8, 16],
            axial_blocks: 3,
            axial_channels: 32,
            n_classes: Label::COUNT,
            dropout_rate: 0.1,
            input_len: 3000,
            spec_frames,
            spec_bins,
        }
    }
}

impl ModelConfig {
    /// Default architecture sized for the given preprocessing output.
    pub fn for_preprocess(pre: &PreprocessConfig) -> Self {
        let mut cfg = Self::default();
        cfg.match_preprocess(pre);
        cfg
    }

    pub fn match_preprocess(&mut self, pre: &PreprocessConfig) {
        self.input_len = pre.target_len;
        (self.spec_frames, self.spec_bins) = pre.spectrogram_shape();
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.axial_channels == 0 || self.axial_channels % self.n_heads != 0 {
            return bad(format!(
                "axial_channels {} must be a positive multiple of n_heads {}",
                self.axial_channels, self.n_heads
            ));
        }
        if self.patch_len == 0 || self.input_len == 0 || self.input_len % self.patch_len != 0 {
            return bad(format!("patch_len {} must divide input_len {}", self.patch_len, self.input_len));
        }
        if self.n_classes != Label::COUNT {
            return bad(format!("n_classes must be {}, got {}", Label::COUNT, self.n_classes));
        }
        if self.ffn_mult == 0 || self.spec_channels.is_empty() || self.spec_channels.contains(&0) {
            return bad("ffn_mult and spec_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.spec_frames == 0 || self.spec_bins == 0 {
            return bad("spectrogram shape must be non-empty".into());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.input_len / self.patch_len
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let channels: Vec<String> = self.spec_channels.iter().map(|c| c.to_string()).collect();
        format!(
            "d_model={}\nn_heads={}\nn_transformer_blocks={}\nffn_mult={}\npatch_len={}\nspec_channels={}\n\
             axial_blocks={}\naxial_channels={}\nn_classes={}\ndropout_rate={}\ninput_len={}\nspec_frames={}\nspec_bins={}\n",
            self.d_model,
            self.n_heads,
            self.n_transformer_blocks,
            self.ffn_mult,
            self.patch_len,
            channels.join(","),
            self.axial_blocks,
            self.axial_channels,
            self.n_classes,
            self.dropout_rate,
            self.input_len,
            self.spec_frames,
            self.spec_bins
        )
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_transformer_blocks" => self.n_transformer_blocks = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "patch_len" => self.patch_len = num(key, value)?,
            "spec_channels" => {
                self.spec_channels = value
                    .split(',')
                    .map(|c| num(key, c))
                    .collect::<Result<Vec<usize>>>()?
            }
            "axial_blocks" => self.axial_blocks = num(key, value)?,
            "axial_channels" => self.axial_channels = num(key, value)?,
            "n_classes" => self.n_classes = num(key, value)?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "input_len" => self.input_len = num(key, value)?,
            "spec_frames" => self.spec_frames = num(key, value)?,
            "spec_bins" => self.spec_bins = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Parameter layout

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

/// Batch norm whose affine terms are offset by projections of the latent.
#[derive(Debug, Clone, Copy)]
struct CondNorm {
    gamma: usize,
    beta: usize,
    w_gamma: usize,
    w_beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    qkv: Dense,
    out: Dense,
    norm1: Norm,
    ff1: Dense,
    ff2: Dense,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Dense,
    cbn1: CondNorm,
    conv2: Dense,
    cbn2: CondNorm,
    skip: Dense,
}

#[derive(Debug, Clone, Copy)]
struct AxialBlock {
    cbn1: CondNorm,
    qkv_time: Dense,
    out_time: Dense,
    qkv_freq: Dense,
    out_freq: Dense,
    cbn2: CondNorm,
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<ParamSpec>,
    embed: Dense,
    encoder: Vec<EncoderBlock>,
    res: Vec<ResBlock>,
    proj: Dense,
    axial: Vec<AxialBlock>,
    spec_out: Dense,
    head: Dense,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            init,
            trainable,
        });
        self.specs.len() - 1
    }

    fn dense(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Dense {
        Dense {
            w: self.add(
                format!("{prefix}.weight"),
                vec![d_in, d_out],
                Init::Xavier {
                    fan_in: d_in,
                    fan_out: d_out,
                },
                true,
            ),
            b: self.add(format!("{prefix}.bias"), vec![d_out], Init::Zeros, true),
        }
    }

    fn conv(&mut self, prefix: &str, k: usize, c_in: usize, c_out: usize) -> Dense {
        Dense {
            w: self.add(
                format!("{prefix}.weight"),
                vec![k, k, c_in, c_out],
                Init::Xavier {
                    fan_in: k * k * c_in,
                    fan_out: k * k * c_out,
                },
                true,
            ),
            b: self.add(format!("{prefix}.bias"), vec![c_out], Init::Zeros, true),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{prefix}.gamma"), vec![d], Init::Ones, true),
            beta: self.add(format!("{prefix}.beta"), vec![d], Init::Zeros, true),
        }
    }

    fn cond_norm(&mut self, prefix: &str, d_latent: usize, c: usize) -> CondNorm {
        CondNorm {
            gamma: self.add(format!("{prefix}.gamma"), vec![c], Init::Ones, true),
            beta: self.add(format!("{prefix}.beta"), vec![c], Init::Zeros, true),
            w_gamma: self.add(format!("{prefix}.w_gamma"), vec![d_latent, c], Init::Zeros, true),
            w_beta: self.add(format!("{prefix}.w_beta"), vec![d_latent, c], Init::Zeros, true),
            running_mean: self.add(format!("{prefix}.running_mean"), vec![c], Init::Zeros, false),
            running_var: self.add(format!("{prefix}.running_var"), vec![c], Init::Ones, false),
        }
    }
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut b = LayoutBuilder { specs: Vec::new() };
        let d = cfg.d_model;
        let embed = b.dense("signal.embed", cfg.patch_len, d);
        let encoder = (0..cfg.n_transformer_blocks)
            .map(|i| {
                let p = format!("signal.block{i}");
                EncoderBlock {
                    qkv: b.dense(&format!("{p}.attn.qkv"), d, 3 * d),
                    out: b.dense(&format!("{p}.attn.out"), d, d),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    ff1: b.dense(&format!("{p}.ffn.fc1"), d, cfg.ffn_mult * d),
                    ff2: b.dense(&format!("{p}.ffn.fc2"), cfg.ffn_mult * d, d),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                }
            })
            .collect();
        let mut c_in = 1;
        let res = cfg
            .spec_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let p = format!("spec.res{i}");
                let block = ResBlock {
                    conv1: b.conv(&format!("{p}.conv1"), 3, c_in, c),
                    cbn1: b.cond_norm(&format!("{p}.cbn1"), d, c),
                    conv2: b.conv(&format!("{p}.conv2"), 3, c, c),
                    cbn2: b.cond_norm(&format!("{p}.cbn2"), d, c),
                    skip: b.conv(&format!("{p}.skip"), 1, c_in, c),
                };
                c_in = c;
                block
            })
            .collect();
        let ca = cfg.axial_channels;
        let proj = b.dense("spec.proj", c_in, ca);
        let axial = (0..cfg.axial_blocks)
            .map(|i| {
                let p = format!("spec.axial{i}");
                AxialBlock {
                    cbn1: b.cond_norm(&format!("{p}.cbn1"), d, ca),
                    qkv_time: b.dense(&format!("{p}.time.qkv"), ca, 3 * ca),
                    out_time: b.dense(&format!("{p}.time.out"), ca, ca),
                    qkv_freq: b.dense(&format!("{p}.freq.qkv"), ca, 3 * ca),
                    out_freq: b.dense(&format!("{p}.freq.out"), ca, ca),
                    cbn2: b.cond_norm(&format!("{p}.cbn2"), d, ca),
                }
            })
            .collect();
        let spec_out = b.dense("spec.out", ca, d);
        let head = b.dense("head", d, cfg.n_classes);
        Self {
            specs: b.specs,
            embed,
            encoder,
            res,
            proj,
            axial,
            spec_out,
            head,
        }
    }
}

/// Sinusoidal positional encoding, `[tokens, d]`.
pub fn positional_encoding(tokens: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; tokens * d];
    for t in 0..tokens {
        for i in (0..d).step_by(2) {
            let angle = t as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[t * d + i] = angle.sin();
            if i + 1 < d {
                pe[t * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

// ---------------------------------------------------------------------------
// Model

/// One training example: model-ready signal, its spectrogram and the label.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub signal: &'a [f64],
    pub spec: &'a Spectrogram,
    pub label: Label,
}

/// Output of [`DualNetModel::gradients`].
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// One tensor per model parameter, in [`DualNetModel::names`] order.
    /// Running statistics get zero gradients.
    pub grads: Vec<Tensor>,
    pub probs: Vec<ProbVector>,
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone)]
pub struct DualNetModel {
    config: ModelConfig,
    layout: Layout,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl PartialEq for DualNetModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl DualNetModel {
    /// Freshly initialised model. Weights are Xavier-uniform, biases and
    /// conditional projections zero, norm scales one. Values are rounded to
    /// single precision so that a saved model reloads bit-identically.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = SplitMix64::new(seed);
        let tensors = layout
            .specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::filled(s.shape.clone(), 1.0),
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n = s.shape.iter().product();
                    Tensor::new(s.shape.clone(), (0..n).map(|_| round_f32(rng.uniform_range(-a, a))).collect())
                }
            })
            .collect();
        Ok(Self::from_parts(config, layout, tensors))
    }

    fn from_parts(config: ModelConfig, layout: Layout, tensors: Vec<Tensor>) -> Self {
        let index = layout.specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Self {
            config,
            layout,
            tensors,
            index,
        }
    }

    /// Assembles a model from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut slots: Vec<Option<Tensor>> = vec![None; layout.specs.len()];
        let index: HashMap<&str, usize> = layout.specs.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
        for (name, t) in named {
            let &i = index.get(name.as_str()).ok_or_else(|| Error::UnknownTensor(name.clone()))?;
            if t.shape != layout.specs[i].shape {
                return Err(Error::Shape(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    layout.specs[i].shape, t.shape
                )));
            }
            if slots[i].is_some() {
                return Err(Error::Shape(format!("tensor {name} appears twice")));
            }
            slots[i] = Some(t);
        }
        let tensors = slots
            .into_iter()
            .zip(&layout.specs)
            .map(|(t, s)| t.ok_or_else(|| Error::Shape(format!("missing tensor {}", s.name))))
            .collect::<Result<Vec<_>>>()?;
        let model = Self::from_parts(config, layout, tensors);
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        for (s, t) in self.layout.specs.iter().zip(&self.tensors) {
            if let Some(v) = t.data.iter().find(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("tensor {} holds non-finite value {v}", s.name)));
            }
            if s.name.ends_with("running_var") && t.data.iter().any(|&v| v < 0.0) {
                return Err(Error::Shape(format!("tensor {} has a negative variance", s.name)));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.layout.specs[i].trainable
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.layout.specs)
            .filter(|(_, s)| s.trainable)
            .map(|(t, _)| t.len())
            .sum()
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    fn check_input(&self, signal: &[f64], spec: &Spectrogram) -> Result<()> {
        let c = &self.config;
        if signal.len() != c.input_len {
            return Err(Error::Shape(format!("signal has {} samples, model expects {}", signal.len(), c.input_len)));
        }
        if (spec.frames, spec.bins) != (c.spec_frames, c.spec_bins) {
            return Err(Error::Shape(format!(
                "spectrogram is {}x{}, model expects {}x{}",
                spec.frames, spec.bins, c.spec_frames, c.spec_bins
            )));
        }
        Ok(())
    }

    /// Builds the network on `g` for a batch. `dropout` supplies the masks in
    /// train mode; `None` disables dropout. Returns (logits, latent).
    fn build(
        &self,
        g: &mut Graph,
        signals: &[&[f64]],
        specs: &[&Spectrogram],
        mode: Mode,
        mut dropout: Option<&mut SplitMix64>,
    ) -> Result<(Var, Var)> {
        let batch = signals.len();
        if batch == 0 || specs.len() != batch {
            return Err(Error::Shape(format!("{} signals, {} spectrograms", batch, specs.len())));
        }
        for (s, sp) in signals.iter().zip(specs) {
            self.check_input(s, sp)?;
        }
        let cfg = &self.config;
        let lay = &self.layout;
        let p: Vec<Var> = self.tensors.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let rate = if mode == Mode::Train { cfg.dropout_rate } else { 0.0 };
        let mut drop = |g: &mut Graph, x: Var| -> Var {
            match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let mask = (0..g.value(x).len())
                        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
                        .collect();
                    g.mul_const(x, mask)
                }
                _ => x,
            }
        };
        let dense = |g: &mut Graph, x: Var, l: Dense| g.linear(x, p[l.w], Some(p[l.b]));

        // Signal branch.
        let (t, d) = (cfg.tokens(), cfg.d_model);
        let mut patches = Vec::with_capacity(batch * cfg.input_len);
        for s in signals {
            patches.extend_from_slice(s);
        }
        let x = g.input(Tensor::new(vec![batch, t, cfg.patch_len], patches));
        let mut h = dense(g, x, lay.embed);
        let pe = positional_encoding(t, d);
        let pe = g.input(Tensor::new(vec![batch, t, d], pe.repeat(batch)));
        h = g.add(h, pe);
        h = drop(g, h);
        for blk in &lay.encoder {
            h = self.attention_sublayer(g, &p, blk, h, &mut drop);
            h = self.ffn_sublayer(g, &p, blk, h, &mut drop);
        }
        let latent = g.mean_pool(h);

        // Spectrogram branch, channels-last [B, frames, bins, C].
        let tensors = &self.tensors;
        let cbn = |g: &mut Graph, x: Var, n: CondNorm| -> Var {
            let running = match mode {
                Mode::Train => None,
                Mode::Eval => Some((&tensors[n.running_mean].data[..], &tensors[n.running_var].data[..])),
            };
            let y = g.batch_norm(x, (n.running_mean, n.running_var), running);
            let scale = g.linear(latent, p[n.w_gamma], Some(p[n.gamma]));
            let shift = g.linear(latent, p[n.w_beta], Some(p[n.beta]));
            g.channel_affine(y, scale, shift)
        };
        let mut img = Vec::with_capacity(batch * cfg.spec_frames * cfg.spec_bins);
        for sp in specs {
            img.extend_from_slice(&sp.values);
        }
        let mut s = g.input(Tensor::new(vec![batch, cfg.spec_frames, cfg.spec_bins, 1], img));
        for blk in &lay.res {
            let m = g.conv2d(s, p[blk.conv1.w], p[blk.conv1.b], 2);
            let m = cbn(g, m, blk.cbn1);
            let m = g.gelu(m);
            let m = g.conv2d(m, p[blk.conv2.w], p[blk.conv2.b], 1);
            let m = cbn(g, m, blk.cbn2);
            let k = g.conv2d(s, p[blk.skip.w], p[blk.skip.b], 2);
            let sum = g.add(m, k);
            s = g.gelu(sum);
        }
        s = dense(g, s, lay.proj);
        let ca = cfg.axial_channels;
        for blk in &lay.axial {
            let shape = g.value(s).shape.clone();
            let (hh, ww) = (shape[1], shape[2]);
            let y = cbn(g, s, blk.cbn1);
            let y = dense(g, y, blk.qkv_time);
            let y = g.attention(y, AttnLayout::along_height(batch, hh, ww, ca, cfg.n_heads));
            let y = dense(g, y, blk.out_time);
            let y = dense(g, y, blk.qkv_freq);
            let y = g.attention(y, AttnLayout::along_width(batch, hh, ww, ca, cfg.n_heads));
            let y = dense(g, y, blk.out_freq);
            let y = cbn(g, y, blk.cbn2);
            let sum = g.add(s, y);
            s = g.gelu(sum);
        }
        let pooled = g.mean_pool(s);
        let v = dense(g, pooled, lay.spec_out);

        let fused = g.add(latent, v);
        let logits = dense(g, fused, lay.head);
        Ok((logits, latent))
    }

    /// `LN(h + dropout(MHSA(h)))` over `[B, T, d]` token states.
    fn attention_sublayer(
        &self,
        g: &mut Graph,
        p: &[Var],
        blk: &EncoderBlock,
        h: Var,
        drop: &mut dyn FnMut(&mut Graph, Var) -> Var,
    ) -> Var {
        let shape = g.value(h).shape.clone();
        let (batch, t, d) = (shape[0], shape[1], shape[2]);
        let a = g.linear(h, p[blk.qkv.w], Some(p[blk.qkv.b]));
        let a = g.attention(a, AttnLayout::sequences(batch, t, d, self.config.n_heads));
        let a = g.linear(a, p[blk.out.w], Some(p[blk.out.b]));
        let a = drop(g, a);
        let r = g.add(h, a);
        g.layer_norm(r, p[blk.norm1.gamma], p[blk.norm1.beta])
    }

    /// `LN(h + dropout(FFN(h)))`.
    fn ffn_sublayer(
        &self,
        g: &mut Graph,
        p: &[Var],
        blk: &EncoderBlock,
        h: Var,
        drop: &mut dyn FnMut(&mut Graph, Var) -> Var,
    ) -> Var {
        let f = g.linear(h, p[blk.ff1.w], Some(p[blk.ff1.b]));
        let f = g.gelu(f);
        let f = g.linear(f, p[blk.ff2.w], Some(p[blk.ff2.b]));
        let f = drop(g, f);
        let r = g.add(h, f);
        g.layer_norm(r, p[blk.norm2.gamma], p[blk.norm2.beta])
    }

    /// Single-record forward pass. In train mode batch norm uses the
    /// statistics of this record alone and `dropout` (when given) supplies
    /// the dropout masks.
    pub fn forward(
        &self,
        signal: &[f64],
        spec: &Spectrogram,
        mode: Mode,
        dropout: Option<&mut SplitMix64>,
    ) -> Result<(ProbVector, Vec<f64>)> {
        let mut g = Graph::new();
        let (logits, latent) = self.build(&mut g, &[signal], &[spec], mode, dropout)?;
        Ok((ProbVector::from_logits(&g.value(logits).data), g.value(latent).data.clone()))
    }

    /// Eval-mode forward pass over a batch, spread over the rayon pool. Each
    /// output depends only on its own input.
    pub fn predict(&self, inputs: &[(&[f64], &Spectrogram)]) -> Result<Vec<(ProbVector, Vec<f64>)>> {
        let chunks: Vec<Vec<(ProbVector, Vec<f64>)>> = inputs
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| self.predict_chunk(chunk))
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    fn predict_chunk(&self, inputs: &[(&[f64], &Spectrogram)]) -> Result<Vec<(ProbVector, Vec<f64>)>> {
        let (signals, specs): (Vec<&[f64]>, Vec<&Spectrogram>) = inputs.iter().copied().unzip();
        let mut g = Graph::new();
        let (logits, latent) = self.build(&mut g, &signals, &specs, Mode::Eval, None)?;
        let (k, d) = (self.config.n_classes, self.config.d_model);
        let (lv, zv) = (&g.value(logits).data, &g.value(latent).data);
        Ok((0..inputs.len())
            .map(|i| (ProbVector::from_logits(&lv[i * k..(i + 1) * k]), zv[i * d..(i + 1) * d].to_vec()))
            .collect())
    }

    /// Mean cross-entropy of a batch and its gradient with respect to every
    /// parameter, with the network in `mode`.
    pub fn gradients(&self, batch: &[Example], mode: Mode, dropout: Option<&mut SplitMix64>) -> Result<Gradients> {
        let signals: Vec<&[f64]> = batch.iter().map(|e| e.signal).collect();
        let specs: Vec<&Spectrogram> = batch.iter().map(|e| e.spec).collect();
        let targets: Vec<usize> = batch.iter().map(|e| e.label.index()).collect();
        let mut g = Graph::new();
        let (logits, _) = self.build(&mut g, &signals, &specs, mode, dropout)?;
        let k = self.config.n_classes;
        let probs = g.value(logits).data.chunks(k).map(ProbVector::from_logits).collect();
        let root = g.softmax_cross_entropy(logits, &targets);
        let loss = g.value(root).data[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: 0, step: 0, loss });
        }
        let raw = g.backward(root, self.tensors.len())?;
        let grads = raw
            .into_iter()
            .zip(&self.tensors)
            .zip(&self.layout.specs)
            .map(|((gr, t), s)| match gr {
                Some(v) if s.trainable => Tensor::new(t.shape.clone(), v),
                _ => Tensor::zeros(t.shape.clone()),
            })
            .collect();
        Ok(Gradients {
            loss,
            grads,
            probs,
            batch_stats: g.batch_stats().to_vec(),
        })
    }

    /// Blends batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for st in stats {
            let (mi, vi) = st.running;
            for (r, b) in self.tensors[mi].data.iter_mut().zip(&st.mean) {
                *r = round_f32((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
            }
            for (r, b) in self.tensors[vi].data.iter_mut().zip(&st.var) {
                *r = round_f32((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
            }
        }
    }
}

/// Cross-entropy of one prediction: `-ln(max(p[label], 1e-12))`.
pub fn loss(probs: &ProbVector, label: Label) -> f64 {
    -probs.get(label).max(PROB_FLOOR).ln()
}
