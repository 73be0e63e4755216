//! Low-rank adapters on fully-connected and convolution weights.
//!
//! A linear site `W0 (d x k)` gains `A (d x r)` and `B (r x k)` with
//! `y = W0 x + A (B x)`. A 3x3 conv site gains a down kernel mapping the input
//! to `r` channels and a 1x1 up kernel mapping back. Adapter tensors live in
//! the same [`ParamStore`] as the base, under `lora.<site>.{a,b,down,up}`.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::denoiser::lora_names;
use crate::error::{Error, Result};
use crate::rng::keyed_stream;
use crate::tensor::{GraphBuilder, NodeId, ParamStore, Tensor};

pub const DEFAULT_RANK: usize = 4;
pub const INIT_STD: f64 = 0.02;
pub const PREFIX: &str = "lora.";

/// Residual-block convolutions plus every conditioning FC.
pub const DEFAULT_SITES: &str =
    r"^((enc|mid|dec)\.[0-9.]+\.(conv1|conv2|emb)|(time|cond)\.fc[12])\.weight$";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Multiplier on the low-rank branch; 1 leaves `W0 + AB` unscaled.
    pub scale: f64,
    /// Regular expression over base parameter names.
    pub sites: String,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: DEFAULT_RANK,
            scale: 1.0,
            sites: DEFAULT_SITES.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    Linear,
    Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraSite {
    pub site: String,
    pub kind: SiteKind,
    pub rank: usize,
}

impl LoraSite {
    pub fn param_names(&self) -> [String; 2] {
        lora_names(&self.site)
    }
}

fn site_kind(name: &str, w: &Tensor) -> Result<SiteKind> {
    match w.shape().len() {
        2 => Ok(SiteKind::Linear),
        4 if w.shape()[2] == w.shape()[3] => Ok(SiteKind::Conv),
        _ => Err(Error::invalid(format!(
            "{name} with shape {:?} is neither FC nor conv",
            w.shape()
        ))),
    }
}

/// Base parameter names matching `pattern`.
pub fn match_sites(params: &ParamStore, pattern: &str) -> Result<Vec<String>> {
    let re = Regex::new(pattern).map_err(|e| Error::invalid(format!("bad site pattern: {e}")))?;
    let sites: Vec<String> = params
        .names()
        .filter(|n| !n.starts_with(PREFIX) && re.is_match(n))
        .map(str::to_string)
        .collect();
    if sites.is_empty() {
        return Err(Error::Unknown {
            kind: "lora site",
            name: pattern.to_string(),
        });
    }
    Ok(sites)
}

/// Adds adapters at the named sites, freezes every base parameter and marks
/// the adapters trainable. `A` and the down kernel draw from `N(0, 0.02^2)`
/// keyed by name; `B` and the up kernel start at zero.
pub fn attach_sites(params: &mut ParamStore, sites: &[String], rank: usize, seed: u64) -> Result<Vec<LoraSite>> {
    if rank == 0 {
        return Err(Error::invalid("lora rank must be at least 1"));
    }
    let mut planned = Vec::new();
    for site in sites {
        let w = params.get(site).ok_or_else(|| Error::Unknown {
            kind: "lora site",
            name: site.clone(),
        })?;
        if site.starts_with(PREFIX) {
            return Err(Error::invalid(format!("{site} is already an adapter")));
        }
        let kind = site_kind(site, w)?;
        let names = lora_names(site);
        let expected = if kind == SiteKind::Conv { "down" } else { "a" };
        if !names[0].ends_with(expected) {
            return Err(Error::invalid(format!("{site} is not named like a {kind:?} site")));
        }
        if params.contains(&names[0]) {
            return Err(Error::invalid(format!("{site} already has an adapter")));
        }
        planned.push((site.clone(), kind, w.shape().to_vec()));
    }
    params.freeze_all();
    let mut out = Vec::new();
    for (site, kind, shape) in planned {
        let [first, second] = lora_names(&site);
        let (first_shape, second_shape) = match kind {
            SiteKind::Linear => (vec![shape[0], rank], vec![rank, shape[1]]),
            SiteKind::Conv => (vec![rank, shape[1], shape[2], shape[3]], vec![shape[0], rank, 1, 1]),
        };
        let init = Tensor::randn(first_shape, INIT_STD, &mut keyed_stream(seed, &first));
        params.insert(first, init, true);
        params.insert(second, Tensor::zeros(second_shape), true);
        out.push(LoraSite { site, kind, rank });
    }
    Ok(out)
}

/// [`attach_sites`] over every base name matching `cfg.sites`.
pub fn attach_lora(params: &mut ParamStore, cfg: &LoraConfig, seed: u64) -> Result<Vec<LoraSite>> {
    let sites = match_sites(params, &cfg.sites)?;
    attach_sites(params, &sites, cfg.rank, seed)
}

/// Sites with adapters present in `params`.
pub fn attached_sites(params: &ParamStore) -> Vec<LoraSite> {
    params
        .names()
        .filter(|n| !n.starts_with(PREFIX))
        .filter_map(|site| {
            let [first, _] = lora_names(site);
            let t = params.get(&first)?;
            let (kind, rank) = if first.ends_with(".down") {
                (SiteKind::Conv, t.shape()[0])
            } else {
                (SiteKind::Linear, t.shape()[1])
            };
            Some(LoraSite {
                site: site.to_string(),
                kind,
                rank,
            })
        })
        .collect()
}

/// Trainable-parameter count implied by a set of sites:
/// `r (d + k)` for FC and `r (in k^2 + out)` for conv.
pub fn adapter_parameter_count(params: &ParamStore, sites: &[LoraSite]) -> Result<usize> {
    let mut total = 0;
    for s in sites {
        let w = params.require(&s.site)?.shape();
        total += match s.kind {
            SiteKind::Linear => s.rank * (w[0] + w[1]),
            SiteKind::Conv => s.rank * (w[1] * w[2] * w[3] + w[0]),
        };
    }
    Ok(total)
}

/// The materialised update for one site, shaped like the base weight.
pub fn delta_weight(params: &ParamStore, site: &LoraSite) -> Result<Tensor> {
    let [first, second] = site.param_names();
    let (p, q) = (params.require(&first)?, params.require(&second)?);
    match site.kind {
        SiteKind::Linear => {
            let (d, r, k) = (p.shape()[0], p.shape()[1], q.shape()[1]);
            let mut out = vec![0.0; d * k];
            for i in 0..d {
                for j in 0..k {
                    out[i * k + j] = (0..r).map(|m| p.data()[i * r + m] * q.data()[m * k + j]).sum();
                }
            }
            Tensor::new([d, k], out)
        }
        SiteKind::Conv => {
            // down: (r, in, kh, kw); up: (out, r, 1, 1)
            let (r, cin, kh, kw) = (p.shape()[0], p.shape()[1], p.shape()[2], p.shape()[3]);
            let cout = q.shape()[0];
            let per = cin * kh * kw;
            let mut out = vec![0.0; cout * per];
            for o in 0..cout {
                for e in 0..per {
                    out[o * per + e] = (0..r).map(|m| q.data()[o * r + m] * p.data()[m * per + e]).sum();
                }
            }
            Tensor::new([cout, cin, kh, kw], out)
        }
    }
}

/// Folds every adapter into its base weight (`W0 + scale * dW`) and returns a
/// store without adapter tensors, all trainable. Fails when nothing is
/// attached, so a second merge is rejected.
pub fn merge_lora(params: &ParamStore, scale: f64) -> Result<ParamStore> {
    let sites = attached_sites(params);
    if sites.is_empty() {
        return Err(Error::invalid("no lora adapters attached; nothing to merge"));
    }
    let owned: Vec<String> = sites.iter().flat_map(|s| s.param_names()).collect();
    if let Some(orphan) = params
        .names()
        .find(|n| n.starts_with(PREFIX) && !owned.iter().any(|o| o == n))
    {
        return Err(Error::Unknown {
            kind: "lora site",
            name: orphan.to_string(),
        });
    }
    let mut merged = base_params(params);
    for s in &sites {
        let delta = delta_weight(params, s)?;
        let w = merged.get_mut(&s.site).expect("site checked");
        for (a, d) in w.data_mut().iter_mut().zip(delta.data()) {
            *a += scale * d;
        }
    }
    let names: Vec<String> = merged.names().map(str::to_string).collect();
    for n in names {
        merged.set_trainable(&n, true)?;
    }
    Ok(merged)
}

/// Adapter tensors only.
pub fn adapter_params(params: &ParamStore) -> ParamStore {
    params.filtered(|n| n.starts_with(PREFIX))
}

/// Base tensors only.
pub fn base_params(params: &ParamStore) -> ParamStore {
    params.filtered(|n| !n.starts_with(PREFIX))
}

fn eval_single(store: ParamStore, build: impl FnOnce(&mut GraphBuilder) -> NodeId, x: &Tensor) -> Result<Tensor> {
    let mut b = GraphBuilder::new();
    let out = build(&mut b);
    b.output("y", out);
    let g = b.build();
    let fwd = g.eval(&[("x", x)], &store)?;
    Ok(fwd.value(out).clone())
}

/// `y = W0 x + A (B x)` for `x` of shape `[N, k]`, without forming `AB`.
pub fn lora_forward_linear(x: &Tensor, w0: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let k = *x.shape().get(1).ok_or_else(|| Error::invalid("x must be [N, k]"))?;
    let mut store = ParamStore::new();
    store.insert("w0", w0.clone(), false);
    store.insert("a", a.clone(), false);
    store.insert("b", b.clone(), false);
    eval_single(
        store,
        |g| {
            let x = g.input("x", &[k]);
            let (w0, a, b) = (g.param("w0"), g.param("a"), g.param("b"));
            let base = g.linear(x, w0);
            let bx = g.linear(x, b);
            let abx = g.linear(bx, a);
            g.add(base, abx)
        },
        x,
    )
}

/// `y = conv(x, W0) + conv1x1(conv(x, down), up)`.
pub fn lora_forward_conv(x: &Tensor, w0: &Tensor, down: &Tensor, up: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::invalid("x must be [N, C, H, W]"));
    }
    let item = x.shape()[1..].to_vec();
    let mut store = ParamStore::new();
    store.insert("w0", w0.clone(), false);
    store.insert("down", down.clone(), false);
    store.insert("up", up.clone(), false);
    eval_single(
        store,
        |g| {
            let x = g.input("x", &item);
            let (w0, down, up) = (g.param("w0"), g.param("down"), g.param("up"));
            let base = g.conv2d(x, w0);
            let mid = g.conv2d(x, down);
            let mid = g.label(mid, "bottleneck");
            let branch = g.conv2d(mid, up);
            g.add(base, branch)
        },
        x,
    )
}
