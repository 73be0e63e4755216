//! Diffusion training and LoRA fine-tuning loops.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::{timestep_batch, Denoiser, DenoiserGraph};
use crate::diffusion::{to_model_domain, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::lora::{self, LoraConfig};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream, Rng};
use crate::tensor::{Dtype, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Full,
    Lora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Storage precision of written checkpoints; arithmetic is always f64.
    pub precision: Dtype,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub mode: TrainMode,
    pub diffusion_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 1000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            precision: Dtype::F64,
            seed: 0,
            checkpoint_every: 0,
            mode: TrainMode::Full,
            diffusion_steps: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("learning_rate, steps and batch_size must be positive"));
        }
        if self.diffusion_steps < 2 {
            return Err(Error::invalid("diffusion_steps must be at least 2"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Raw-domain clean/noisy planes `[N, 4, h, w]` and optional `[N, dim]`
/// condition vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x0: Tensor,
    pub y: Tensor,
    pub cond: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait BatchSource {
    fn next_batch(&mut self, batch_size: usize) -> Result<Batch>;
}

/// Always yields the same batch.
pub struct FixedBatch(pub Batch);

impl BatchSource for FixedBatch {
    fn next_batch(&mut self, _: usize) -> Result<Batch> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub timesteps: Vec<usize>,
}

/// `x_t` for a batch with one timestep per item.
pub fn noisy_batch(x0m: &Tensor, ts: &[usize], eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    let per = x0m.len() / ts.len();
    let mut out = x0m.clone();
    for (i, &t) in ts.iter().enumerate() {
        if t == 0 || t > sched.steps() {
            return Err(Error::invalid(format!("timestep {t} out of range")));
        }
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let chunk = i * per..(i + 1) * per;
        for (v, e) in out.data_mut()[chunk.clone()].iter_mut().zip(&eps.data()[chunk]) {
            *v = a * *v + b * e;
        }
    }
    Ok(out)
}

pub struct Trainer {
    pub model: Denoiser,
    pub config: TrainConfig,
    opt: Adam,
    sched: DiffusionSchedule,
    rng: Rng,
    step: u64,
    graph: Option<((usize, usize), DenoiserGraph)>,
}

impl Trainer {
    pub fn new(model: Denoiser, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let has_adapters = !lora::attached_sites(&model.params).is_empty();
        if config.mode == TrainMode::Lora && !has_adapters {
            return Err(Error::invalid("lora mode requires attached adapters"));
        }
        let sched = DiffusionSchedule::cosine(config.diffusion_steps)?;
        Ok(Trainer {
            opt: Adam::new(config.adam())?,
            rng: stream(config.seed, 1),
            step: 0,
            graph: None,
            model,
            config,
            sched,
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn into_model(self) -> Denoiser {
        self.model
    }

    fn graph_for(&mut self, h: usize, w: usize) -> Result<()> {
        if self.graph.as_ref().map(|(k, _)| *k) != Some((h, w)) {
            self.graph = Some(((h, w), self.model.graph(h, w, true)?));
        }
        Ok(())
    }

    /// Samples `t` and noise per item, evaluates the L1 loss on `x0`,
    /// backpropagates and updates the trainable parameters.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let s = batch.x0.shape().to_vec();
        if s.len() != 4 || batch.y.shape() != s.as_slice() {
            return Err(Error::invalid(format!("batch shapes {:?} / {:?}", s, batch.y.shape())));
        }
        let n = s[0];
        let total = self.sched.steps();
        let ts: Vec<usize> = (0..n).map(|_| self.rng.gen_range(1..=total)).collect();
        let eps = Tensor::randn(s.clone(), 1.0, &mut self.rng);
        let x0m = to_model_domain(&batch.x0);
        let ym = to_model_domain(&batch.y);
        let x_t = noisy_batch(&x0m, &ts, &eps, &self.sched)?;
        let temb = timestep_batch(&ts, self.model.config.time_embed_dim);
        self.graph_for(s[2], s[3])?;
        let step = self.step + 1;
        let diverged = |loss: f64, ts: &[usize]| Error::Diverged {
            step,
            loss,
            timesteps: ts.to_vec(),
        };
        let (_, g) = self.graph.as_ref().expect("graph cached");
        let loss_node = g.loss.expect("training graph has a loss");
        let mut feed = self.model.feed(&x_t, &ym, &temb, batch.cond.as_ref());
        feed.push(("target", &x0m));
        let fwd = match g.graph.eval(&feed, &self.model.params) {
            Ok(f) => f,
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN, &ts)),
            Err(e) => return Err(e),
        };
        let loss = fwd.value(loss_node).item()?;
        if !loss.is_finite() {
            return Err(diverged(loss, &ts));
        }
        let grads = g.graph.backprop(&fwd, loss_node, &self.model.params)?;
        drop(fwd);
        if grads.values().any(|t| !t.all_finite()) {
            return Err(diverged(loss, &ts));
        }
        self.opt.update(&mut self.model.params, &grads)?;
        self.step = step;
        Ok(StepStats {
            step,
            loss,
            timesteps: ts,
        })
    }

    /// Runs `config.steps` steps, calling `on_step` after each.
    pub fn fit(
        &mut self,
        source: &mut dyn BatchSource,
        mut on_step: impl FnMut(&StepStats, &Trainer) -> Result<()>,
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.config.steps as usize);
        for _ in 0..self.config.steps {
            let batch = source.next_batch(self.config.batch_size)?;
            let stats = self.train_step(&batch)?;
            losses.push(stats.loss);
            on_step(&stats, self)?;
        }
        Ok(losses)
    }
}

/// One JSON object per line: step, loss, learning rate, seconds since start.
pub struct MetricsLog {
    out: BufWriter<File>,
    start: Instant,
}

#[derive(Serialize)]
struct MetricsLine {
    step: u64,
    loss: f64,
    lr: f64,
    wall_time: f64,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(MetricsLog {
            out: BufWriter::new(File::create(path)?),
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, step: u64, loss: f64, lr: f64) -> Result<()> {
        let line = MetricsLine {
            step,
            loss,
            lr,
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        serde_json::to_writer(&mut self.out, &line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Attaches adapters to a copy of `base` and trains only them.
pub fn finetune_lora(
    base: &Denoiser,
    source: &mut dyn BatchSource,
    config: &TrainConfig,
    lora_cfg: &LoraConfig,
    on_step: impl FnMut(&StepStats, &Trainer) -> Result<()>,
) -> Result<(Denoiser, Vec<f64>)> {
    let mut model = base.clone();
    lora::attach_lora(&mut model.params, lora_cfg, config.seed)?;
    model.lora_scale = lora_cfg.scale;
    let config = TrainConfig {
        mode: TrainMode::Lora,
        ..config.clone()
    };
    let mut trainer = Trainer::new(model, config)?;
    let losses = trainer.fit(source, on_step)?;
    Ok((trainer.into_model(), losses))
}

/// Moving average over `window` values (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}
