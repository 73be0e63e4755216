//! DDPM schedule, closed-form forward noising, and x0-parameterised
//! ancestral sampling.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `alpha_bar(0) = 1`. The model
//! works in `[-1, 1]`; raw `[0, 1]` values are mapped with `2z - 1`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::raw::RawImage;
use crate::tensor::Tensor;

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

fn cosine_f(t: f64, steps: f64) -> f64 {
    let v = ((t / steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
    v.cos().powi(2)
}

impl DiffusionSchedule {
    /// Cosine schedule: `alpha_bar(t) = f(t) / f(0)` with
    /// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`, discretised into betas
    /// clamped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("diffusion needs T >= 2, got {steps}")));
        }
        let t = steps as f64;
        let f0 = cosine_f(0.0, t);
        let betas = (1..=steps)
            .map(|i| {
                let prev = cosine_f((i - 1) as f64, t) / f0;
                let cur = cosine_f(i as f64, t) / f0;
                (1.0 - cur / prev).min(MAX_BETA)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::invalid("diffusion needs at least two steps"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("betas must lie in (0, 1), got {b}")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Ok(DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One step of the forward chain: `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step(x_prev: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check(t)?;
    let beta = sched.beta(t);
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    x_prev.zip_map(eps, |x, e| a * x + b * e)
}

/// Mean coefficients and variance of the Gaussian posterior between `t` and
/// an earlier step `s` (`s = t - 1` for the full chain).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub x0: f64,
    pub xt: f64,
    pub variance: f64,
}

pub fn posterior_coefficients(sched: &DiffusionSchedule, t: usize, s: usize) -> Result<PosteriorCoefficients> {
    sched.check(t)?;
    if s >= t {
        return Err(Error::invalid(format!("posterior target {s} must precede {t}")));
    }
    if s == 0 {
        return Ok(PosteriorCoefficients {
            x0: 1.0,
            xt: 0.0,
            variance: 0.0,
        });
    }
    let (ab_t, ab_s) = (sched.alpha_bar(t), sched.alpha_bar(s));
    let (alpha, beta, variance) = if s + 1 == t {
        (sched.alpha(t), sched.beta(t), sched.posterior_variance(t))
    } else {
        let alpha = ab_t / ab_s;
        let beta = 1.0 - alpha;
        (alpha, beta, (1.0 - ab_s) / (1.0 - ab_t) * beta)
    };
    Ok(PosteriorCoefficients {
        x0: ab_s.sqrt() * beta / (1.0 - ab_t),
        xt: alpha.sqrt() * (1.0 - ab_s) / (1.0 - ab_t),
        variance,
    })
}

/// Draws `x_s ~ q(x_s | x_t, x0 = x0_hat)`; with `s = 0` the result is
/// `x0_hat` itself.
pub fn posterior_step_to<R: Rng + ?Sized>(
    x0_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    s: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let c = posterior_coefficients(sched, t, s)?;
    if s == 0 {
        if x0_hat.shape() != x_t.shape() {
            return Err(Error::invalid("x0_hat and x_t shapes differ"));
        }
        return Ok(x0_hat.clone());
    }
    let sigma = c.variance.sqrt();
    let mut out = x0_hat.zip_map(x_t, |a, b| c.x0 * a + c.xt * b)?;
    for v in out.data_mut() {
        let n: f64 = rng.sample(rand_distr::StandardNormal);
        *v += sigma * n;
    }
    Ok(out)
}

/// One ancestral step `t -> t - 1`.
pub fn posterior_step<R: Rng + ?Sized>(
    x0_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    posterior_step_to(x0_hat, x_t, t, t - 1, sched, rng)
}

/// A network estimating the clean sample from `(x_t, y, t, cond)`, all in
/// model domain with a leading batch axis.
pub trait X0Predictor {
    fn predict_x0(&self, x_t: &Tensor, y: &Tensor, t: usize, cond: Option<&Tensor>) -> Result<Tensor>;
}

impl<F> X0Predictor for F
where
    F: Fn(&Tensor, &Tensor, usize, Option<&Tensor>) -> Result<Tensor>,
{
    fn predict_x0(&self, x_t: &Tensor, y: &Tensor, t: usize, cond: Option<&Tensor>) -> Result<Tensor> {
        self(x_t, y, t, cond)
    }
}

/// Descending timesteps visited by the sampler: all of `T..=1` by default, or
/// `steps` evenly spaced values from `T` down to 1.
pub fn sampling_timesteps(total: usize, steps: Option<usize>) -> Result<Vec<usize>> {
    let k = steps.unwrap_or(total);
    if k == 0 || k > total {
        return Err(Error::invalid(format!("sampling steps must be in [1, {total}], got {k}")));
    }
    if k == total {
        return Ok((1..=total).rev().collect());
    }
    if k == 1 {
        return Ok(vec![total]);
    }
    let mut ts: Vec<usize> = (0..k)
        .map(|i| 1 + ((total - 1) as f64 * i as f64 / (k - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

pub fn to_model_domain(raw: &Tensor) -> Tensor {
    raw.map(|v| 2.0 * v - 1.0)
}

pub fn from_model_domain(x: &Tensor) -> Tensor {
    x.map(|v| (v + 1.0) / 2.0)
}

/// Ancestral sampling for a batch of measurements `y` (raw domain,
/// `[N, 4, h, w]`). Returns the final clean estimate in raw domain.
pub fn ddpm_sample_batch<M: X0Predictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    y: &Tensor,
    cond: Option<&Tensor>,
    sched: &DiffusionSchedule,
    steps: Option<usize>,
    rng: &mut R,
) -> Result<Tensor> {
    let ts = sampling_timesteps(sched.steps(), steps)?;
    let y_model = to_model_domain(y);
    let mut x = Tensor::randn(y.shape().to_vec(), 1.0, rng);
    let mut x0_hat = None;
    for (i, &t) in ts.iter().enumerate() {
        let pred = model.predict_x0(&x, &y_model, t, cond)?;
        if pred.shape() != x.shape() {
            return Err(Error::invalid(format!(
                "model returned shape {:?} for input {:?}",
                pred.shape(),
                x.shape()
            )));
        }
        let pred = pred.map(|v| v.clamp(-1.0, 1.0));
        let s = ts.get(i + 1).copied().unwrap_or(0);
        x = posterior_step_to(&pred, &x, t, s, sched, rng)?;
        x0_hat = Some(pred);
    }
    Ok(from_model_domain(&x0_hat.expect("at least one timestep")))
}

/// Single-image convenience wrapper around [`ddpm_sample_batch`]. `cond` is a
/// `[1, dim]` tensor or absent.
pub fn ddpm_sample<M: X0Predictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    y: &RawImage,
    cond: Option<&Tensor>,
    sched: &DiffusionSchedule,
    steps: Option<usize>,
    rng: &mut R,
) -> Result<RawImage> {
    let mut shape = vec![1];
    shape.extend_from_slice(y.planes().shape());
    let batch = y.planes().clone().reshape(shape)?;
    let out = ddpm_sample_batch(model, &batch, cond, sched, steps, rng)?;
    y.with_planes(out.reshape(y.planes().shape().to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn t1000_schedule_is_decreasing_and_ends_near_zero() {
        let s = DiffusionSchedule::cosine(1000).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!(s.betas().iter().all(|&b| b > 0.0 && b <= MAX_BETA));
    }

    #[test]
    fn first_alpha_bar_matches_closed_form() {
        for t in [2usize, 16, 64, 1000] {
            let s = DiffusionSchedule::cosine(t).unwrap();
            let direct = cosine_f(1.0, t as f64) / cosine_f(0.0, t as f64);
            assert!((s.alpha_bar(1) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn small_schedule_clamps_betas() {
        let s = DiffusionSchedule::cosine(16).unwrap();
        assert!(s.betas().iter().all(|&b| b <= MAX_BETA));
        // the last step of the cosine curve hits the clamp
        assert_eq!(*s.betas().last().unwrap(), MAX_BETA);
    }

    #[test]
    fn alpha_bar_is_the_running_product() {
        let s = DiffusionSchedule::cosine(50).unwrap();
        let mut acc = 1.0;
        for t in 1..=50 {
            acc *= s.alpha(t);
            assert_eq!(acc, s.alpha_bar(t));
        }
    }

    #[test]
    fn posterior_variance_never_exceeds_beta() {
        let s = DiffusionSchedule::cosine(1000).unwrap();
        for t in 1..=1000 {
            assert!(s.posterior_variance(t) <= s.beta(t));
        }
    }

    #[test]
    fn rejects_short_schedules_and_bad_timesteps() {
        assert!(DiffusionSchedule::cosine(1).is_err());
        let s = DiffusionSchedule::cosine(8).unwrap();
        let x = Tensor::zeros([2]);
        assert!(q_sample(&x, 0, &x, &s).is_err());
        assert!(q_sample(&x, 9, &x, &s).is_err());
    }

    #[test]
    fn zero_noise_scales_the_signal() {
        let s = DiffusionSchedule::cosine(100).unwrap();
        let x0 = Tensor::from_vec(vec![0.3, -0.7, 1.0]);
        let xt = q_sample(&x0, 40, &Tensor::zeros([3]), &s).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert_eq!(*a, s.alpha_bar(40).sqrt() * b);
        }
    }

    #[test]
    fn final_step_returns_prediction_exactly() {
        let s = DiffusionSchedule::cosine(10).unwrap();
        let x0 = Tensor::from_vec(vec![0.1, -0.4, 0.9]);
        let xt = Tensor::from_vec(vec![3.0, -2.0, 0.5]);
        let out = posterior_step(&x0, &xt, 1, &s, &mut seeded(0)).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn posterior_mean_of_noise_free_input_is_scaled_signal() {
        // with x_t = sqrt(ab_t) x0 the posterior mean is sqrt(ab_{t-1}) x0,
        // i.e. c_x0 + c_xt sqrt(ab_t) = sqrt(ab_{t-1})
        let s = DiffusionSchedule::cosine(1000).unwrap();
        for t in 1..=1000 {
            let c = posterior_coefficients(&s, t, t - 1).unwrap();
            let lhs = c.x0 + c.xt * s.alpha_bar(t).sqrt();
            assert!((lhs - s.alpha_bar(t - 1).sqrt()).abs() < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn strided_timesteps_descend_to_one() {
        assert_eq!(sampling_timesteps(10, None).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        let ts = sampling_timesteps(1000, Some(50)).unwrap();
        assert_eq!(ts.first(), Some(&1000));
        assert_eq!(ts.last(), Some(&1));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(ts.len(), 50);
        assert!(sampling_timesteps(10, Some(11)).is_err());
    }
}
