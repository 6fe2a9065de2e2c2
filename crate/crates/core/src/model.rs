//! The vision transformer: convolutional stem, learnable positional encoding,
//! UFO blocks, class-attention stage and linear head.
//!
//! Parameters live in a flat, named list in a fixed order. A forward pass
//! binds them to a [`Tape`] and walks the architecture by index.

use std::fmt;

use crate::attention::{ufo_attention_on, AttentionDims, AttentionSpec, AttentionVars, NormKind};
use crate::counters::{measure, CounterScope};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

const WEIGHT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    /// Token width `d_model`.
    pub dim: usize,
    /// Total Q/K/V width.
    pub embed: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub input_resolution: usize,
    pub num_classes: usize,
    pub in_chans: usize,
    /// Stochastic-depth probability of the last block.
    pub droppath_rate: f64,
    pub class_attn_depth: usize,
    pub ffn_ratio: usize,
    pub norm_kind: NormKind,
    /// Floor inside the attention normalization.
    pub xnorm_eps: f64,
    /// Initial value of every residual-branch Affine scale.
    pub affine_init: f64,
}

impl ModelConfig {
    fn table(depth: usize, dim: usize, embed: usize, heads: usize) -> Self {
        ModelConfig {
            depth,
            dim,
            embed,
            heads,
            patch_size: 16,
            input_resolution: 224,
            num_classes: 1000,
            in_chans: 3,
            droppath_rate: 0.1,
            class_attn_depth: 2,
            ffn_ratio: 4,
            norm_kind: NormKind::XNorm,
            xnorm_eps: 1e-6,
            affine_init: 1e-4,
        }
    }

    pub fn ufo_vit_t() -> Self {
        ModelConfig { droppath_rate: 0.05, ..Self::table(24, 192, 96, 4) }
    }

    pub fn ufo_vit_s() -> Self {
        Self::table(12, 384, 128, 8)
    }

    pub fn ufo_vit_m() -> Self {
        Self::table(24, 384, 128, 8)
    }

    pub fn ufo_vit_b() -> Self {
        Self::table(24, 512, 128, 8)
    }

    /// Desk-scale model for 32×32 inputs.
    pub fn tiny() -> Self {
        ModelConfig {
            depth: 4,
            dim: 64,
            embed: 32,
            heads: 4,
            patch_size: 4,
            input_resolution: 32,
            num_classes: 10,
            droppath_rate: 0.05,
            ..Self::table(0, 0, 0, 1)
        }
    }

    /// Looks up `tiny`, `t`, `s`, `m`, `b` (or `ufo-vit-t` and so on),
    /// case-insensitively.
    pub fn preset(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        let key = key.strip_prefix("ufo-vit-").unwrap_or(&key);
        match key {
            "tiny" => Ok(Self::tiny()),
            "t" => Ok(Self::ufo_vit_t()),
            "s" => Ok(Self::ufo_vit_s()),
            "m" => Ok(Self::ufo_vit_m()),
            "b" => Ok(Self::ufo_vit_b()),
            _ => Err(Error::usage(format!(
                "unknown model `{name}` (expected tiny, T, S, M or B)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(format!("invalid model config: {m}")));
        if self.depth == 0 || self.dim == 0 || self.embed == 0 || self.heads == 0 {
            return bad("depth, dim, embed and heads must be positive".into());
        }
        if self.num_classes == 0 || self.in_chans == 0 || self.ffn_ratio == 0 {
            return bad("num_classes, in_chans and ffn_ratio must be positive".into());
        }
        if self.embed % self.heads != 0 {
            return bad(format!("embed {} is not divisible by {} heads", self.embed, self.heads));
        }
        if self.patch_size < 4 || self.patch_size % 4 != 0 {
            return bad(format!("patch_size {} must be a positive multiple of 4", self.patch_size));
        }
        if self.input_resolution == 0 || self.input_resolution % self.patch_size != 0 {
            return bad(format!(
                "input_resolution {} is not divisible by patch_size {}",
                self.input_resolution, self.patch_size
            ));
        }
        if self.dim < 8 {
            return bad(format!("dim {} must be at least 8", self.dim));
        }
        if !(0.0..1.0).contains(&self.droppath_rate) {
            return bad(format!("droppath_rate {} must lie in [0, 1)", self.droppath_rate));
        }
        if !(self.xnorm_eps >= 0.0) {
            return bad(format!("xnorm_eps {} must be >= 0", self.xnorm_eps));
        }
        if !self.affine_init.is_finite() {
            return bad(format!("affine_init {} must be finite", self.affine_init));
        }
        Ok(())
    }

    /// Side of the token grid at the configured resolution.
    pub fn grid(&self) -> usize {
        self.input_resolution / self.patch_size
    }

    /// Output channels of the two stride-2 stem convolutions.
    pub fn stem_channels(&self) -> (usize, usize) {
        (self.dim / 8, self.dim / 4)
    }

    /// Attention extents at `tokens` tokens.
    pub fn attention_dims(&self, tokens: usize) -> AttentionDims {
        AttentionDims { tokens, d_model: self.dim, d_embed: self.embed, heads: self.heads }
    }

    /// Stochastic-depth probability of block `i`, linear from 0 to the rate.
    pub fn droppath_at(&self, i: usize) -> f64 {
        if self.depth <= 1 {
            0.0
        } else {
            self.droppath_rate * i as f64 / (self.depth - 1) as f64
        }
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "depth={} dim={} embed={} heads={} patch={} res={} classes={} in_chans={} droppath={} norm={}",
            self.depth,
            self.dim,
            self.embed,
            self.heads,
            self.patch_size,
            self.input_resolution,
            self.num_classes,
            self.in_chans,
            self.droppath_rate,
            self.norm_kind
        )
    }
}

/// One named parameter.
#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether AdamW applies weight decay.
    pub decay: bool,
    /// Part of the classifier head.
    pub head: bool,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    scale: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_proj: usize,
    gamma_q: usize,
    gamma_kv: usize,
    p: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    norm1: Norm,
    attn: Attn,
    affine1: Affine,
    norm2: Norm,
    dw1: Linear,
    dw2: Linear,
    affine2: Affine,
    norm3: Norm,
    ffn: Ffn,
    affine3: Affine,
}

#[derive(Clone, Copy, Debug)]
struct ClassBlock {
    norm1: Norm,
    attn: Attn,
    affine1: Affine,
    norm2: Norm,
    ffn: Ffn,
    affine2: Affine,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: [Linear; 3],
    pos_enc: usize,
    blocks: Vec<Block>,
    cls_token: usize,
    class_blocks: Vec<ClassBlock>,
    norm: Norm,
    head: Linear,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

/// Fan-in scaled, so the stem passes image signal at unit scale.
fn conv_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

struct Builder<'a, T: Element> {
    params: Vec<Param<T>>,
    rng: &'a mut SplitMix64,
    affine_init: f64,
}

impl<T: Element> Builder<'_, T> {
    fn add(&mut self, name: String, shape: &[usize], init: Init, decay: bool) -> usize {
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Normal(std) => {
                let v: Vec<f64> = (0..n).map(|_| self.rng.trunc_normal(std)).collect();
                Tensor::from_parts(shape.to_vec(), v.into_iter().map(T::from_f64).collect())
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Const(c) => Tensor::full(shape, T::from_f64(c)),
        };
        self.params.push(Param { name, value, decay, head: false });
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Normal(WEIGHT_STD), true),
            b: self.add(format!("{prefix}.bias"), &[fan_out], Init::Zeros, false),
        }
    }

    fn conv(&mut self, prefix: &str, out_c: usize, in_c: usize, k: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.weight"), &[out_c, in_c, k, k], Init::Normal(conv_std(in_c * k * k)), true),
            b: self.add(format!("{prefix}.bias"), &[out_c], Init::Zeros, false),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{prefix}.weight"), &[d], Init::Ones, false),
            b: self.add(format!("{prefix}.bias"), &[d], Init::Zeros, false),
        }
    }

    fn affine(&mut self, prefix: &str, d: usize) -> Affine {
        Affine {
            scale: self.add(format!("{prefix}.scale"), &[d], Init::Const(self.affine_init), false),
            bias: self.add(format!("{prefix}.bias"), &[d], Init::Zeros, false),
        }
    }

    fn attn(&mut self, prefix: &str, c: &ModelConfig) -> Attn {
        let (d, e, h) = (c.dim, c.embed, c.heads);
        let w_q = self.add(format!("{prefix}.w_q"), &[d, e], Init::Normal(WEIGHT_STD), true);
        let w_k = self.add(format!("{prefix}.w_k"), &[d, e], Init::Normal(WEIGHT_STD), true);
        let w_v = self.add(format!("{prefix}.w_v"), &[d, e], Init::Normal(WEIGHT_STD), true);
        let w_proj = self.add(format!("{prefix}.w_proj"), &[e, d], Init::Normal(WEIGHT_STD), true);
        let gamma_q = self.add(format!("{prefix}.gamma_q"), &[h], Init::Ones, false);
        let gamma_kv = self.add(format!("{prefix}.gamma_kv"), &[h], Init::Ones, false);
        let p = c.norm_kind.has_exponent().then(|| {
            (
                self.add(format!("{prefix}.p_q"), &[h], Init::Const(2.0), false),
                self.add(format!("{prefix}.p_kv"), &[h], Init::Const(2.0), false),
            )
        });
        Attn { w_q, w_k, w_v, w_proj, gamma_q, gamma_kv, p }
    }

    fn ffn(&mut self, prefix: &str, c: &ModelConfig) -> Ffn {
        let hidden = c.dim * c.ffn_ratio;
        Ffn {
            fc1: self.linear(&format!("{prefix}.fc1"), c.dim, hidden),
            fc2: self.linear(&format!("{prefix}.fc2"), hidden, c.dim),
        }
    }
}

/// Which parameters receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Everything is a constant.
    Nothing,
    All,
    /// Only the classifier head.
    HeadOnly,
}

/// Norms of one residual update, recorded when probing.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchStat {
    /// Block label, for example `blocks.2.attn`.
    pub name: String,
    pub branch_norm: f64,
    pub trunk_norm: f64,
}

/// Result of [`UfoViT::forward_on`].
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `[B, num_classes]`.
    pub logits: Var,
    /// Tape variable of every parameter, in model order.
    pub params: Vec<Var>,
    /// Flops spent inside attention kernels.
    pub attention_flops: u64,
    pub branches: Vec<BranchStat>,
}

/// Options of [`UfoViT::forward_on`].
pub struct ForwardOptions<'a> {
    pub train: bool,
    pub trainable: Trainable,
    /// Source of DropPath masks; required when `train` and any rate is non-zero.
    pub rng: Option<&'a mut SplitMix64>,
    /// Record residual-branch norms.
    pub probe: bool,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions { train: false, trainable: Trainable::Nothing, rng: None, probe: false }
    }
}

/// Built model: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct UfoViT<T: Element> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

/// Per-sample stochastic depth: each sample's residual is kept with
/// probability `1 − p` and rescaled by `1/(1 − p)`. Identity in eval mode or
/// when `p == 0`.
pub fn droppath<T: Element>(tape: &mut Tape<T>, x: Var, p: f64, train: bool, rng: &mut SplitMix64) -> Result<Var> {
    if !train || p == 0.0 {
        return Ok(x);
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::usage(format!("droppath probability {p} must lie in [0, 1)")));
    }
    let shape = tape.shape(x).to_vec();
    let batch = shape[0];
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<T> = (0..batch)
        .map(|_| T::from_f64(if rng.bernoulli(1.0 - p) { keep } else { 0.0 }))
        .collect();
    let mut mshape = vec![1; shape.len()];
    mshape[0] = batch;
    let m = tape.constant(Tensor::from_vec(&mshape, mask)?)?;
    tape.mul(x, m)
}

impl<T: Element> UfoViT<T> {
    /// Builds a model with weights drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = SplitMix64::new(seed);
        let mut b = Builder { params: Vec::new(), rng: &mut rng, affine_init: c.affine_init };
        let (c1, c2) = c.stem_channels();
        let k3 = c.patch_size / 4;
        let stem = [
            b.conv("stem.0", c1, c.in_chans, 3),
            b.conv("stem.1", c2, c1, 3),
            b.conv("stem.2", c.dim, c2, k3),
        ];
        let g = c.grid();
        let pos_enc = b.add("pos_enc".into(), &[c.dim, g, g], Init::Normal(WEIGHT_STD), false);
        let blocks = (0..c.depth)
            .map(|i| {
                let p = format!("blocks.{i}");
                let d = c.dim;
                Block {
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    attn: b.attn(&format!("{p}.attn"), c),
                    affine1: b.affine(&format!("{p}.affine1"), d),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                    dw1: b.conv(&format!("{p}.dwconv1"), d, 1, 3),
                    dw2: b.conv(&format!("{p}.dwconv2"), d, 1, 3),
                    affine2: b.affine(&format!("{p}.affine2"), d),
                    norm3: b.norm(&format!("{p}.norm3"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), c),
                    affine3: b.affine(&format!("{p}.affine3"), d),
                }
            })
            .collect();
        let cls_token = b.add("cls_token".into(), &[1, 1, c.dim], Init::Normal(WEIGHT_STD), false);
        let class_blocks = (0..c.class_attn_depth)
            .map(|i| {
                let p = format!("class_blocks.{i}");
                ClassBlock {
                    norm1: b.norm(&format!("{p}.norm1"), c.dim),
                    attn: b.attn(&format!("{p}.attn"), c),
                    affine1: b.affine(&format!("{p}.affine1"), c.dim),
                    norm2: b.norm(&format!("{p}.norm2"), c.dim),
                    ffn: b.ffn(&format!("{p}.ffn"), c),
                    affine2: b.affine(&format!("{p}.affine2"), c.dim),
                }
            })
            .collect();
        let norm = b.norm("norm", c.dim);
        let head = b.linear("head", c.dim, c.num_classes);
        let mut params = b.params;
        params[head.w].head = true;
        params[head.b].head = true;
        Ok(UfoViT {
            config: config.clone(),
            params,
            layout: Layout { stem, pos_enc, blocks, cls_token, class_blocks, norm, head },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total scalar parameter count.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces every parameter by the tensor of the same name. Missing names
    /// and shape differences are errors; nothing is modified on error.
    pub fn load_params(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let mut next = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::MissingTensor(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            next.push(t.clone());
        }
        for (p, t) in self.params.iter_mut().zip(next) {
            p.value = t;
        }
        Ok(())
    }

    /// The positional-encoding grid as stored.
    pub fn pos_enc(&self) -> &Tensor<T> {
        &self.params[self.layout.pos_enc].value
    }

    /// Attention weights of class-attention block `i`.
    pub fn class_attention_params(&self, i: usize) -> Result<crate::attention::AttentionParams<T>> {
        let cb = self
            .layout
            .class_blocks
            .get(i)
            .ok_or_else(|| Error::usage(format!("model has no class-attention block {i}")))?;
        Ok(self.attention_params(&cb.attn))
    }

    fn attention_params(&self, a: &Attn) -> crate::attention::AttentionParams<T> {
        let v = |i: usize| self.params[i].value.clone();
        let h = self.config.heads;
        let (p_q, p_kv) = match a.p {
            Some((q, kv)) => (v(q), v(kv)),
            None => (Tensor::full(&[h], T::from_f64(2.0)), Tensor::full(&[h], T::from_f64(2.0))),
        };
        crate::attention::AttentionParams {
            w_q: v(a.w_q),
            w_k: v(a.w_k),
            w_v: v(a.w_v),
            w_proj: v(a.w_proj),
            gamma_q: v(a.gamma_q),
            gamma_kv: v(a.gamma_kv),
            p_q,
            p_kv,
            eps: self.config.xnorm_eps,
            kind: self.config.norm_kind,
        }
    }

    /// Eval-mode logits for `images: [B, C, H, W]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(images.clone())?;
        let out = self.forward_on(&mut tape, x, ForwardOptions::eval())?;
        Ok(tape.value(out.logits).clone())
    }

    /// Logits without gradient tracking. `rng` drives DropPath in train mode.
    pub fn forward(&self, images: &Tensor<T>, train_mode: bool, rng: &mut SplitMix64) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(images.clone())?;
        let opts = ForwardOptions { train: train_mode, trainable: Trainable::Nothing, rng: Some(rng), probe: false };
        let out = self.forward_on(&mut tape, x, opts)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Inputs of class-attention block `i` for a single image: the
    /// normalized `[cls; patches]` sequence `[N+1, d]` and the normalized
    /// class query `[1, d]`.
    pub fn class_attention_inputs(&self, image: &Tensor<T>, i: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        if i >= self.layout.class_blocks.len() {
            return Err(Error::usage(format!("model has no class-attention block {i}")));
        }
        let mut tape = Tape::no_grad();
        let x = tape.constant(image.clone())?;
        let mut captured = None;
        self.run(&mut tape, x, None, ForwardOptions::eval(), Some((i, &mut captured)))?;
        let (u, q) = captured.expect("class block visited");
        let (n1, d) = (tape.shape(u)[1], self.config.dim);
        Ok((tape.value(u).reshape(&[n1, d])?, tape.value(q).reshape(&[1, d])?))
    }

    /// Full forward pass on a tape.
    pub fn forward_on(&self, tape: &mut Tape<T>, images: Var, opts: ForwardOptions<'_>) -> Result<ForwardOut> {
        self.run(tape, images, None, opts, None)
    }

    /// Forward pass using caller-bound parameter variables, one per entry of
    /// [`params`](Self::params) and in the same order. `opts.trainable` is
    /// ignored.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        images: Var,
        params: &[Var],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOut> {
        if params.len() != self.params.len() {
            return Err(Error::usage(format!(
                "model has {} parameters, {} variables were bound",
                self.params.len(),
                params.len()
            )));
        }
        for (p, &v) in self.params.iter().zip(params) {
            if tape.shape(v) != p.value.shape() {
                return Err(Error::dim(format!(
                    "variable bound to {} has shape {:?}, expected {:?}",
                    p.name,
                    tape.shape(v),
                    p.value.shape()
                )));
            }
        }
        self.run(tape, images, Some(params), opts, None)
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        images: Var,
        bound: Option<&[Var]>,
        mut opts: ForwardOptions<'_>,
        mut capture: Option<(usize, &mut Option<(Var, Var)>)>,
    ) -> Result<ForwardOut> {
        let c = &self.config;
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!("images must be [B, C, H, W], got {shape:?}")));
        }
        let (bsz, chans, ih, iw) = (shape[0], shape[1], shape[2], shape[3]);
        if chans != c.in_chans {
            return Err(Error::dim(format!("model expects {} input channels, got {chans}", c.in_chans)));
        }
        if ih % c.patch_size != 0 || iw % c.patch_size != 0 {
            return Err(Error::dim(format!(
                "image {ih}x{iw} is not divisible by patch size {}",
                c.patch_size
            )));
        }
        if opts.train && c.droppath_rate > 0.0 && opts.rng.is_none() {
            return Err(Error::usage("train-mode forward with DropPath needs an rng"));
        }
        let trainable = opts.trainable;
        let vars: Vec<Var> = match bound {
            Some(v) => v.to_vec(),
            None => self
                .params
                .iter()
                .map(|p| {
                    let grad = match trainable {
                        Trainable::All => true,
                        Trainable::HeadOnly => p.head,
                        Trainable::Nothing => false,
                    };
                    if grad {
                        tape.param(p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect::<Result<_>>()?,
        };
        let l = &self.layout;
        let d = c.dim;

        // Stem.
        let mut x = images;
        for (i, conv) in l.stem.iter().enumerate() {
            let (stride, pad) = if i < 2 { (2, 1) } else { (c.patch_size / 4, 0) };
            x = tape.conv2d(x, vars[conv.w], stride, pad, 1)?;
            x = channel_bias(tape, x, vars[conv.b])?;
            if i < 2 {
                x = tape.gelu(x)?;
            }
        }
        let (gh, gw) = (tape.shape(x)[2], tape.shape(x)[3]);
        let g = c.grid();
        let pos = if (gh, gw) == (g, g) { vars[l.pos_enc] } else { tape.bicubic_resize2d(vars[l.pos_enc], gh, gw)? };
        x = tape.add(x, pos)?;
        let n = gh * gw;
        let x = tape.reshape(x, &[bsz, d, n])?;
        let mut x = tape.transpose(x)?;

        let spec = AttentionSpec { heads: c.heads, kind: c.norm_kind, eps: c.xnorm_eps };
        let mut attention_flops = 0;
        let mut branches = Vec::new();
        let mut residual = |tape: &mut Tape<T>,
                            x: Var,
                            branch: Var,
                            affine: &Affine,
                            p: f64,
                            name: String,
                            branches: &mut Vec<BranchStat>|
         -> Result<Var> {
            let y = tape.mul(branch, vars[affine.scale])?;
            let y = tape.add(y, vars[affine.bias])?;
            if opts.probe {
                branches.push(BranchStat {
                    name,
                    branch_norm: tape.value(y).l2_norm().as_f64(),
                    trunk_norm: tape.value(x).l2_norm().as_f64(),
                });
            }
            let y = match opts.rng.as_deref_mut() {
                Some(rng) => droppath(tape, y, p, opts.train, rng)?,
                None => y,
            };
            tape.add(x, y)
        };

        for (i, b) in l.blocks.iter().enumerate() {
            let p = c.droppath_at(i);
            let h = layer_norm(tape, x, &b.norm1, &vars)?;
            let av = attn_vars(&b.attn, &vars);
            let scope = CounterScope::enter();
            let a = ufo_attention_on(tape, h, h, &av, &spec, None)?;
            attention_flops += scope.snapshot().flops;
            drop(scope);
            x = residual(tape, x, a, &b.affine1, p, format!("blocks.{i}.attn"), &mut branches)?;

            let h = layer_norm(tape, x, &b.norm2, &vars)?;
            let h = tape.transpose(h)?;
            let h = tape.reshape(h, &[bsz, d, gh, gw])?;
            let h = tape.conv2d(h, vars[b.dw1.w], 1, 1, d)?;
            let h = channel_bias(tape, h, vars[b.dw1.b])?;
            let h = tape.gelu(h)?;
            let h = tape.conv2d(h, vars[b.dw2.w], 1, 1, d)?;
            let h = channel_bias(tape, h, vars[b.dw2.b])?;
            let h = tape.reshape(h, &[bsz, d, n])?;
            let h = tape.transpose(h)?;
            x = residual(tape, x, h, &b.affine2, p, format!("blocks.{i}.conv"), &mut branches)?;

            let h = layer_norm(tape, x, &b.norm3, &vars)?;
            let h = ffn(tape, h, &b.ffn, &vars)?;
            x = residual(tape, x, h, &b.affine3, p, format!("blocks.{i}.ffn"), &mut branches)?;
        }

        let copies = vec![vars[l.cls_token]; bsz];
        let mut cls = if bsz == 1 { copies[0] } else { tape.concat(&copies, 0)? };
        for (i, cb) in l.class_blocks.iter().enumerate() {
            let u = tape.concat(&[cls, x], 1)?;
            let u = layer_norm(tape, u, &cb.norm1, &vars)?;
            let q = tape.slice(u, 1, 0, 1)?;
            if let Some((want, slot)) = capture.as_mut() {
                if *want == i {
                    **slot = Some((u, q));
                }
            }
            let av = attn_vars(&cb.attn, &vars);
            let scope = CounterScope::enter();
            let a = ufo_attention_on(tape, q, u, &av, &spec, None)?;
            attention_flops += scope.snapshot().flops;
            drop(scope);
            cls = residual(tape, cls, a, &cb.affine1, 0.0, format!("class_blocks.{i}.attn"), &mut branches)?;
            let h = layer_norm(tape, cls, &cb.norm2, &vars)?;
            let h = ffn(tape, h, &cb.ffn, &vars)?;
            cls = residual(tape, cls, h, &cb.affine2, 0.0, format!("class_blocks.{i}.ffn"), &mut branches)?;
        }

        let y = layer_norm(tape, cls, &l.norm, &vars)?;
        let y = tape.reshape(y, &[bsz, d])?;
        let y = tape.matmul(y, vars[l.head.w])?;
        let logits = tape.add(y, vars[l.head.b])?;
        Ok(ForwardOut { logits, params: vars, attention_flops, branches })
    }
}

fn attn_vars(a: &Attn, vars: &[Var]) -> AttentionVars {
    AttentionVars {
        w_q: vars[a.w_q],
        w_k: vars[a.w_k],
        w_v: vars[a.w_v],
        w_proj: vars[a.w_proj],
        gamma_q: vars[a.gamma_q],
        gamma_kv: vars[a.gamma_kv],
        p_q: a.p.map(|(q, _)| vars[q]),
        p_kv: a.p.map(|(_, kv)| vars[kv]),
    }
}

fn channel_bias<T: Element>(tape: &mut Tape<T>, x: Var, b: Var) -> Result<Var> {
    let c = tape.shape(b)[0];
    let b = tape.reshape(b, &[c, 1, 1])?;
    tape.add(x, b)
}

fn layer_norm<T: Element>(tape: &mut Tape<T>, x: Var, n: &Norm, vars: &[Var]) -> Result<Var> {
    tape.layer_norm(x, vars[n.g], vars[n.b], LN_EPS)
}

fn ffn<T: Element>(tape: &mut Tape<T>, x: Var, f: &Ffn, vars: &[Var]) -> Result<Var> {
    let h = tape.matmul(x, vars[f.fc1.w])?;
    let h = tape.add(h, vars[f.fc1.b])?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, vars[f.fc2.w])?;
    tape.add(h, vars[f.fc2.b])
}

/// Flop breakdown of one counted forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopCount {
    pub total: u64,
    pub attention: u64,
}

/// Flops in the convention of published model tables, where a multiply-add
/// counts once, in billions.
pub fn table_gflops(flops: u64) -> f64 {
    flops as f64 / 2e9
}

/// Counted flops of one eval forward at batch 1 and the configured resolution.
pub fn count_flops(config: &ModelConfig) -> Result<u64> {
    Ok(count_flops_at(config, config.input_resolution)?.total)
}

/// Counted flops of one eval forward at batch 1 on `resolution`² inputs.
pub fn count_flops_at(config: &ModelConfig, resolution: usize) -> Result<FlopCount> {
    let model = UfoViT::<f32>::build(config, 0)?;
    let images = Tensor::<f32>::zeros(&[1, config.in_chans, resolution, resolution]);
    let (out, counts) = measure(|| -> Result<u64> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(images)?;
        Ok(model.forward_on(&mut tape, x, ForwardOptions::eval())?.attention_flops)
    });
    Ok(FlopCount { total: counts.flops, attention: out? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig {
            depth: 2,
            dim: 16,
            embed: 8,
            heads: 2,
            patch_size: 4,
            input_resolution: 8,
            num_classes: 3,
            in_chans: 1,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn presets_validate() {
        for name in ["tiny", "T", "s", "UFO-ViT-M", "b"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(matches!(ModelConfig::preset("xl"), Err(Error::Usage(_))));
    }

    #[test]
    fn invalid_config_is_usage_error() {
        let mut c = ModelConfig::tiny();
        c.input_resolution = 30;
        assert!(matches!(UfoViT::<f32>::build(&c, 0), Err(Error::Usage(_))));
        let mut c = ModelConfig::tiny();
        c.droppath_rate = 1.0;
        assert!(matches!(c.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn names_are_unique_and_stable() {
        let a = UfoViT::<f32>::build(&micro(), 1).unwrap();
        let b = UfoViT::<f32>::build(&micro(), 2).unwrap();
        let names: Vec<_> = a.params().iter().map(|p| p.name.clone()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names, b.params().iter().map(|p| p.name.clone()).collect::<Vec<_>>());
        assert_eq!(names[0], "stem.0.weight");
        assert_eq!(names.last().unwrap(), "head.bias");
    }

    #[test]
    fn logits_have_batch_by_class_shape() {
        let m = UfoViT::<f64>::build(&micro(), 3).unwrap();
        let y = m.predict(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.is_finite());
    }

    #[test]
    fn wrong_channel_count_is_dimension_error() {
        let m = UfoViT::<f64>::build(&micro(), 3).unwrap();
        assert!(matches!(m.predict(&Tensor::zeros(&[1, 3, 8, 8])), Err(Error::Dimension(_))));
    }

    #[test]
    fn droppath_eval_and_zero_rate_are_identity() {
        let mut rng = SplitMix64::new(0);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[4, 2])).unwrap();
        assert_eq!(droppath(&mut tape, x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(droppath(&mut tape, x, 0.0, true, &mut rng).unwrap(), x);
    }

    #[test]
    fn droppath_rate_ramps_linearly() {
        let c = ModelConfig { depth: 5, droppath_rate: 0.2, ..ModelConfig::tiny() };
        let rates: Vec<f64> = (0..5).map(|i| c.droppath_at(i)).collect();
        assert_eq!(rates[0], 0.0);
        assert!((rates[4] - 0.2).abs() < 1e-15);
        assert!((rates[2] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn load_params_rejects_missing_and_misshapen() {
        let mut m = UfoViT::<f32>::build(&micro(), 0).unwrap();
        let mut tensors: Vec<(String, Tensor<f32>)> =
            m.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let removed = tensors.remove(3);
        assert!(matches!(m.load_params(&tensors), Err(Error::MissingTensor(n)) if n == removed.0));
        tensors.insert(3, (removed.0, Tensor::zeros(&[1])));
        assert!(matches!(m.load_params(&tensors), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn learnable_p_adds_exponents() {
        let mut c = micro();
        let base = UfoViT::<f32>::build(&c, 0).unwrap().count_params();
        c.norm_kind = NormKind::LearnableP;
        let with_p = UfoViT::<f32>::build(&c, 0).unwrap().count_params();
        assert_eq!(with_p - base, 2 * c.heads * (c.depth + c.class_attn_depth));
    }
}
