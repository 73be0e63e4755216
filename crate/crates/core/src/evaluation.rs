//! Reconstruction quality of a model over a fixed set of noisy/clean pairs.

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::diffusion::{ddpm_sample_batch, DiffusionSchedule, X0Predictor};
use crate::error::{Error, Result};
use crate::metrics::{psnr_slices, report_psnr};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub l1: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scores: Vec<PairScore>,
    pub mean_l1: f64,
    /// Mean of capped per-image PSNR values.
    pub mean_psnr: f64,
}

impl Evaluation {
    pub fn from_scores(scores: Vec<PairScore>) -> Self {
        let n = scores.len().max(1) as f64;
        Evaluation {
            mean_l1: scores.iter().map(|s| s.l1).sum::<f64>() / n,
            mean_psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
            scores,
        }
    }
}

pub fn score(estimate: &[f64], clean: &[f64]) -> Result<PairScore> {
    let psnr = report_psnr(psnr_slices(estimate, clean, 1.0)?);
    let l1 = estimate.iter().zip(clean).map(|(a, b)| (a - b).abs()).sum::<f64>() / clean.len() as f64;
    Ok(PairScore { l1, psnr })
}

/// Scores the noisy inputs themselves.
pub fn evaluate_identity(samples: &[Sample]) -> Result<Evaluation> {
    let scores = samples
        .iter()
        .map(|s| score(s.y.planes().data(), s.x0.planes().data()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_scores(scores))
}

/// Reconstructions for `samples`, sampled in batches of `batch`; batch `k`
/// draws from stream `(seed, k)`, so results do not depend on anything but
/// the seed and the batch size.
pub fn reconstruct<M: X0Predictor + ?Sized>(
    model: &M,
    samples: &[Sample],
    sched: &DiffusionSchedule,
    steps: Option<usize>,
    seed: u64,
    batch: usize,
) -> Result<Vec<Tensor>> {
    if batch == 0 {
        return Err(Error::invalid("batch must be positive"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for (k, chunk) in samples.chunks(batch).enumerate() {
        let y = Tensor::stack(&chunk.iter().map(|s| s.y.planes().clone()).collect::<Vec<_>>())?;
        let cond = if chunk.iter().all(|s| s.cond.is_some()) {
            let rows: Vec<f64> = chunk.iter().flat_map(|s| s.cond.as_ref().unwrap().data().to_vec()).collect();
            let dim = rows.len() / chunk.len();
            Some(Tensor::new([chunk.len(), dim], rows)?)
        } else {
            None
        };
        let mut rng = stream(seed, k as u64);
        let est = ddpm_sample_batch(model, &y, cond.as_ref(), sched, steps, &mut rng)?;
        for i in 0..chunk.len() {
            out.push(est.index(i)?);
        }
    }
    Ok(out)
}

pub fn evaluate_model<M: X0Predictor + ?Sized>(
    model: &M,
    samples: &[Sample],
    sched: &DiffusionSchedule,
    steps: Option<usize>,
    seed: u64,
    batch: usize,
) -> Result<Evaluation> {
    let recon = reconstruct(model, samples, sched, steps, seed, batch)?;
    let scores = recon
        .iter()
        .zip(samples)
        .map(|(r, s)| score(r.data(), s.x0.planes().data()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_scores(scores))
}
