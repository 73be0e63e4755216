//! Conditional x0-predicting residual U-Net.
//!
//! Inputs are `x_t` and the noisy measurement `y` (both `[N, 4, h, w]` in
//! model domain), a raw sinusoidal timestep encoding and, for the
//! conditioned variant, a `[N, cond_dim]` condition vector. The time and
//! condition paths each run two fully-connected layers; their sum is
//! projected per residual block and added to the feature map after the
//! block's first convolution.

use serde::{Deserialize, Serialize};

use crate::diffusion::X0Predictor;
use crate::error::{Error, Result};
use crate::rng::keyed_stream;
use crate::tensor::{Graph, GraphBuilder, NodeId, ParamStore, Tensor};

pub const COND_DIM: usize = 768;
pub const NULL_COND: &str = "cond.null";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of 2x down/up levels.
    pub depth: usize,
    pub blocks_per_level: usize,
    pub cond_dim: usize,
    pub time_embed_dim: usize,
    /// Training crop in mosaic pixels; planes are half this size.
    pub patch_size: usize,
    /// Replace the per-image condition with a single trainable vector.
    pub uncond: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 32,
            depth: 2,
            blocks_per_level: 2,
            cond_dim: COND_DIM,
            time_embed_dim: 128,
            patch_size: 32,
            uncond: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.base_channels == 0 || self.blocks_per_level == 0 || self.cond_dim == 0 {
            return bad("base_channels, blocks_per_level and cond_dim must be positive".into());
        }
        if self.depth > 6 {
            return bad(format!("depth {} is too large", self.depth));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim must be even and >= 4, got {}", self.time_embed_dim));
        }
        if self.patch_size % 2 != 0 || (self.patch_size / 2) % (1 << self.depth) != 0 || self.patch_size == 0 {
            return bad(format!(
                "patch_size {} must be even with planes divisible by {}",
                self.patch_size,
                1 << self.depth
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * (level + 1)
    }

    /// Plane extents accepted by the network.
    pub fn check_extents(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << self.depth;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!(
                "plane extents {h}x{w} must be positive multiples of {m}"
            )));
        }
        Ok(())
    }
}

/// Group count for `channels`: the largest divisor not above `min(8, channels)`.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Text,
    Null,
}

/// A 768-value text embedding, or the null marker used by the
/// unconditioned model.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    values: Vec<f64>,
    kind: ConditionKind,
}

impl ConditionVector {
    pub fn text(values: Vec<f64>) -> Result<Self> {
        if values.len() != COND_DIM {
            return Err(Error::DimensionMismatch {
                expected: COND_DIM,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("condition vector has non-finite values"));
        }
        Ok(ConditionVector {
            values,
            kind: ConditionKind::Text,
        })
    }

    pub fn null() -> Self {
        ConditionVector {
            values: vec![0.0; COND_DIM],
            kind: ConditionKind::Null,
        }
    }

    pub fn kind(&self) -> ConditionKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.values.len()], self.values.clone()).expect("length checked")
    }
}

/// Raw sinusoidal encoding `[sin(t f_i)..., cos(t f_i)...]` with
/// `f_i = 10000^(-i / (half - 1))`.
pub fn timestep_encoding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let freqs: Vec<f64> = (0..half).map(|i| 10000f64.powf(-(i as f64) / denom)).collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    out
}

/// Stacked encodings for a batch of timesteps: `[N, dim]`.
pub fn timestep_batch(ts: &[usize], dim: usize) -> Tensor {
    let data = ts.iter().flat_map(|&t| timestep_encoding(t as f64, dim)).collect();
    Tensor::new([ts.len(), dim], data).expect("sized from inputs")
}

/// Knobs for graph construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphOptions {
    /// Add the time/condition modulation to each residual block.
    pub modulate: bool,
    /// Add a `target` input and an L1 `loss` output.
    pub with_loss: bool,
    /// Multiplier on every low-rank branch.
    pub lora_scale: f64,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            modulate: true,
            with_loss: false,
            lora_scale: 1.0,
        }
    }
}

pub struct DenoiserGraph {
    pub graph: Graph,
    pub output: NodeId,
    pub loss: Option<NodeId>,
}

pub fn lora_names(site: &str) -> [String; 2] {
    if site.ends_with(".weight") && is_conv_site(site) {
        [format!("lora.{site}.down"), format!("lora.{site}.up")]
    } else {
        [format!("lora.{site}.a"), format!("lora.{site}.b")]
    }
}

fn is_conv_site(site: &str) -> bool {
    site.contains(".conv") || site.starts_with("conv_") || site.contains(".skip.")
}

struct Net<'a> {
    b: GraphBuilder,
    params: &'a ParamStore,
    lora_scale: f64,
}

impl Net<'_> {
    fn has_lora(&self, site: &str) -> bool {
        self.params.contains(&lora_names(site)[0])
    }

    fn adapter(&mut self, branch: NodeId) -> NodeId {
        if self.lora_scale == 1.0 {
            branch
        } else {
            self.b.scale(branch, self.lora_scale)
        }
    }

    /// Bias-free linear layer `name.weight`, with its adapter if attached.
    fn linear_w(&mut self, x: NodeId, name: &str) -> NodeId {
        let site = format!("{name}.weight");
        let w = self.b.param(&site);
        let mut y = self.b.linear(x, w);
        if self.has_lora(&site) {
            let [a, bn] = lora_names(&site);
            let (a, bn) = (self.b.param(&a), self.b.param(&bn));
            let bx = self.b.linear(x, bn);
            let abx = self.b.linear(bx, a);
            let abx = self.adapter(abx);
            y = self.b.add(y, abx);
        }
        self.b.label(y, name)
    }

    fn fc(&mut self, x: NodeId, name: &str) -> NodeId {
        let y = self.linear_w(x, name);
        let bias = self.b.param(&format!("{name}.bias"));
        self.b.bias_add(y, bias)
    }

    fn conv(&mut self, x: NodeId, name: &str) -> NodeId {
        let site = format!("{name}.weight");
        let w = self.b.param(&site);
        let mut y = self.b.conv2d(x, w);
        if self.has_lora(&site) {
            let [down, up] = lora_names(&site);
            let (down, up) = (self.b.param(&down), self.b.param(&up));
            let mid = self.b.conv2d(x, down);
            let branch = self.b.conv2d(mid, up);
            let branch = self.adapter(branch);
            y = self.b.add(y, branch);
        }
        let bias = self.b.param(&format!("{name}.bias"));
        let y = self.b.bias_add(y, bias);
        self.b.label(y, name)
    }

    fn norm(&mut self, x: NodeId, name: &str, channels: usize) -> NodeId {
        let g = self.b.param(&format!("{name}.gamma"));
        let be = self.b.param(&format!("{name}.beta"));
        let y = self.b.group_norm(x, g, be, group_count(channels));
        self.b.label(y, name)
    }

    fn res_block(&mut self, x: NodeId, name: &str, cin: usize, cout: usize, emb: Option<NodeId>) -> NodeId {
        let h = self.norm(x, &format!("{name}.norm1"), cin);
        let h = self.b.silu(h);
        let mut h = self.conv(h, &format!("{name}.conv1"));
        if let Some(emb) = emb {
            let v = self.linear_w(emb, &format!("{name}.emb"));
            h = self.b.add_channel_vector(h, v);
        }
        let h = self.norm(h, &format!("{name}.norm2"), cout);
        let h = self.b.silu(h);
        let h = self.conv(h, &format!("{name}.conv2"));
        let skip = if cin == cout {
            x
        } else {
            self.conv(x, &format!("{name}.skip"))
        };
        let out = self.b.add(skip, h);
        self.b.label(out, name)
    }
}

/// Builds the network for planes of `h x w` into `b` and returns the
/// prediction node. Parameters are looked up by name only when evaluated;
/// `params` decides which adapters are wired in.
pub fn build_into(
    b: GraphBuilder,
    cfg: &DenoiserConfig,
    params: &ParamStore,
    h: usize,
    w: usize,
    opts: GraphOptions,
) -> Result<(GraphBuilder, NodeId)> {
    cfg.validate()?;
    cfg.check_extents(h, w)?;
    let mut n = Net {
        b,
        params,
        lora_scale: opts.lora_scale,
    };
    let x_t = n.b.input("x_t", &[4, h, w]);
    let y = n.b.input("y", &[4, h, w]);
    let temb = n.b.input("temb", &[cfg.time_embed_dim]);

    let emb = if opts.modulate {
        let t1 = n.fc(temb, "time.fc1");
        let t1 = n.b.silu(t1);
        let t2 = n.fc(t1, "time.fc2");
        let cond = if cfg.uncond {
            let null = n.b.param(NULL_COND);
            n.b.expand_batch(null, temb)
        } else {
            n.b.input("cond", &[cfg.cond_dim])
        };
        let c1 = n.fc(cond, "cond.fc1");
        let c1 = n.b.silu(c1);
        let c2 = n.fc(c1, "cond.fc2");
        let m = n.b.add(t2, c2);
        let m = n.b.label(m, "modulation");
        Some(n.b.silu(m))
    } else {
        None
    };

    let x = n.b.concat(&[x_t, y]);
    let mut hcur = n.conv(x, "conv_in");
    let mut ch = cfg.channels(0);
    let mut skips = Vec::new();
    for l in 0..cfg.depth {
        for k in 0..cfg.blocks_per_level {
            let out = cfg.channels(l);
            hcur = n.res_block(hcur, &format!("enc.{l}.{k}"), ch, out, emb);
            ch = out;
        }
        skips.push((hcur, ch));
        hcur = n.b.downsample2x(hcur);
    }
    for k in 0..cfg.blocks_per_level {
        let out = cfg.channels(cfg.depth);
        hcur = n.res_block(hcur, &format!("mid.{k}"), ch, out, emb);
        ch = out;
    }
    for l in (0..cfg.depth).rev() {
        let (skip, sch) = skips.pop().expect("one skip per level");
        let up = n.b.upsample2x(hcur);
        hcur = n.b.concat(&[up, skip]);
        ch += sch;
        for k in 0..cfg.blocks_per_level {
            let out = cfg.channels(l);
            hcur = n.res_block(hcur, &format!("dec.{l}.{k}"), ch, out, emb);
            ch = out;
        }
    }
    let hcur = n.norm(hcur, "out_norm", ch);
    let hcur = n.b.silu(hcur);
    let out = n.conv(hcur, "conv_out");
    let out = n.b.label(out, "x0_hat");
    Ok((n.b, out))
}

pub fn build_graph(
    cfg: &DenoiserConfig,
    params: &ParamStore,
    h: usize,
    w: usize,
    opts: GraphOptions,
) -> Result<DenoiserGraph> {
    let (mut b, output) = build_into(GraphBuilder::new(), cfg, params, h, w, opts)?;
    b.output("x0_hat", output);
    let loss = if opts.with_loss {
        let target = b.input("target", &[4, h, w]);
        let loss = b.l1_loss(output, target);
        b.output("loss", loss);
        Some(b.label(loss, "loss"))
    } else {
        None
    };
    Ok(DenoiserGraph {
        graph: b.build(),
        output,
        loss,
    })
}

/// Shape of every base parameter, in a fixed order.
pub fn parameter_shapes(cfg: &DenoiserConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let e = cfg.time_embed_dim;
    let fc = |out: &mut Vec<(String, Vec<usize>)>, name: &str, i: usize, o: usize| {
        out.push((format!("{name}.weight"), vec![o, i]));
        out.push((format!("{name}.bias"), vec![o]));
    };
    fc(&mut out, "time.fc1", e, e);
    fc(&mut out, "time.fc2", e, e);
    fc(&mut out, "cond.fc1", cfg.cond_dim, e);
    fc(&mut out, "cond.fc2", e, e);
    if cfg.uncond {
        out.push((NULL_COND.to_string(), vec![1, cfg.cond_dim]));
    }
    let conv = |out: &mut Vec<(String, Vec<usize>)>, name: &str, i: usize, o: usize, k: usize| {
        out.push((format!("{name}.weight"), vec![o, i, k, k]));
        out.push((format!("{name}.bias"), vec![o]));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize| {
        out.push((format!("{name}.gamma"), vec![c]));
        out.push((format!("{name}.beta"), vec![c]));
    };
    let block = |out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize| {
        norm(out, &format!("{name}.norm1"), cin);
        conv(out, &format!("{name}.conv1"), cin, cout, 3);
        out.push((format!("{name}.emb.weight"), vec![cout, e]));
        norm(out, &format!("{name}.norm2"), cout);
        conv(out, &format!("{name}.conv2"), cout, cout, 3);
        if cin != cout {
            conv(out, &format!("{name}.skip"), cin, cout, 1);
        }
    };
    conv(&mut out, "conv_in", 8, cfg.channels(0), 3);
    let mut ch = cfg.channels(0);
    let mut skips = Vec::new();
    for l in 0..cfg.depth {
        for k in 0..cfg.blocks_per_level {
            block(&mut out, &format!("enc.{l}.{k}"), ch, cfg.channels(l));
            ch = cfg.channels(l);
        }
        skips.push(ch);
    }
    for k in 0..cfg.blocks_per_level {
        block(&mut out, &format!("mid.{k}"), ch, cfg.channels(cfg.depth));
        ch = cfg.channels(cfg.depth);
    }
    for l in (0..cfg.depth).rev() {
        ch += skips.pop().expect("one skip per level");
        for k in 0..cfg.blocks_per_level {
            block(&mut out, &format!("dec.{l}.{k}"), ch, cfg.channels(l));
            ch = cfg.channels(l);
        }
    }
    norm(&mut out, "out_norm", ch);
    conv(&mut out, "conv_out", ch, 4, 3);
    Ok(out)
}

fn init_value(name: &str, shape: &[usize], seed: u64) -> Tensor {
    let zero = name.starts_with("conv_out.") || name.ends_with(".bias") || name.ends_with(".beta");
    if zero {
        return Tensor::zeros(shape.to_vec());
    }
    if name.ends_with(".gamma") {
        return Tensor::full(shape.to_vec(), 1.0);
    }
    let fan_in: usize = if name == NULL_COND {
        shape[1]
    } else {
        shape[1..].iter().product()
    };
    let std = 1.0 / (fan_in as f64).sqrt();
    Tensor::randn(shape.to_vec(), std, &mut keyed_stream(seed, name))
}

/// Fresh parameters; every tensor draws from its own stream keyed by name,
/// so values do not depend on construction order.
pub fn init_params(cfg: &DenoiserConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, shape) in parameter_shapes(cfg)? {
        let v = init_value(&name, &shape, seed);
        store.insert(name, v, true);
    }
    Ok(store)
}

/// Configuration plus weights (and any attached adapters).
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    pub lora_scale: f64,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Denoiser {
            config,
            params,
            lora_scale: 1.0,
        })
    }

    pub fn from_parts(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        for (name, shape) in parameter_shapes(&config)? {
            let t = params.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Malformed {
                    what: "denoiser parameters",
                    detail: format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
        }
        Ok(Denoiser {
            config,
            params,
            lora_scale: 1.0,
        })
    }

    pub fn graph(&self, h: usize, w: usize, with_loss: bool) -> Result<DenoiserGraph> {
        build_graph(
            &self.config,
            &self.params,
            h,
            w,
            GraphOptions {
                with_loss,
                lora_scale: self.lora_scale,
                ..GraphOptions::default()
            },
        )
    }

    fn check_batch(&self, x_t: &Tensor, y: &Tensor, ts: &[usize], cond: Option<&Tensor>) -> Result<()> {
        let s = x_t.shape();
        if s.len() != 4 || s[1] != 4 || y.shape() != s {
            return Err(Error::invalid(format!(
                "x_t {:?} and y {:?} must share shape [N, 4, h, w]",
                s,
                y.shape()
            )));
        }
        if ts.len() != s[0] {
            return Err(Error::invalid(format!("{} timesteps for batch of {}", ts.len(), s[0])));
        }
        if !self.config.uncond {
            let c = cond.ok_or_else(|| Error::invalid("conditioned model needs a condition vector"))?;
            if c.shape() != [s[0], self.config.cond_dim] {
                return Err(Error::DimensionMismatch {
                    expected: self.config.cond_dim,
                    found: c.shape().last().copied().unwrap_or(0),
                });
            }
        }
        Ok(())
    }

    /// Feed for one batch; `cond` is ignored by the unconditioned variant.
    pub fn feed<'a>(
        &self,
        x_t: &'a Tensor,
        y: &'a Tensor,
        temb: &'a Tensor,
        cond: Option<&'a Tensor>,
    ) -> Vec<(&'static str, &'a Tensor)> {
        let mut feed = vec![("x_t", x_t), ("y", y), ("temb", temb)];
        if !self.config.uncond {
            if let Some(c) = cond {
                feed.push(("cond", c));
            }
        }
        feed
    }

    /// One forward pass with a timestep per batch item.
    pub fn predict_x0_batch(&self, x_t: &Tensor, y: &Tensor, ts: &[usize], cond: Option<&Tensor>) -> Result<Tensor> {
        self.check_batch(x_t, y, ts, cond)?;
        let g = self.graph(x_t.shape()[2], x_t.shape()[3], false)?;
        let temb = timestep_batch(ts, self.config.time_embed_dim);
        let feed = self.feed(x_t, y, &temb, cond);
        let fwd = g.graph.eval(&feed, &self.params)?;
        Ok(fwd.value(g.output).clone())
    }
}

impl X0Predictor for Denoiser {
    fn predict_x0(&self, x_t: &Tensor, y: &Tensor, t: usize, cond: Option<&Tensor>) -> Result<Tensor> {
        let ts = vec![t; x_t.shape().first().copied().unwrap_or(0)];
        self.predict_x0_batch(x_t, y, &ts, cond)
    }
}
