//! Forward diffusion, the denoising training loss, noise/score conversions,
//! deterministic reverse sampling, and the input-reconstruction diagnostic.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::net::{DenoiserNet, NoisePredictor};
use crate::params::ParamVector;
use crate::rng::standard_normal_vec;
use crate::schedule::{noised, NoiseSchedule, TimestepSampler};

/// One training point: the clean vector, its noise draw, and the diffused
/// result at timestep `t`.
#[derive(Debug, Clone)]
pub struct DiffusionSample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: usize,
    pub x_t: Vec<f64>,
    pub y: Option<usize>,
}

impl DiffusionSample {
    /// Builds a sample from a caller-supplied noise vector (test hook; the
    /// normal path is `forward_sample`).
    pub fn with_eps(
        sched: &NoiseSchedule,
        x0: Vec<f64>,
        y: Option<usize>,
        t: usize,
        eps: Vec<f64>,
    ) -> Result<Self> {
        if eps.len() != x0.len() {
            return Err(Error::Structural("noise and data dimensions differ".into()));
        }
        let x_t = noised(&x0, &eps, sched.abar(t)?);
        Ok(Self { x0, eps, t, x_t, y })
    }
}

/// Diffuses `x0` to a random draw of x_t with fresh standard-normal noise.
pub fn forward_sample(
    sched: &NoiseSchedule,
    x0: &[f64],
    y: Option<usize>,
    t: usize,
    rng: &mut ChaCha12Rng,
) -> Result<DiffusionSample> {
    let eps = standard_normal_vec(x0.len(), rng);
    DiffusionSample::with_eps(sched, x0.to_vec(), y, t, eps)
}

/// Draws a timestep per sample and diffuses each point.
pub fn prepare_batch(
    sched: &NoiseSchedule,
    data: &[(Vec<f64>, Option<usize>)],
    sampler: TimestepSampler,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<DiffusionSample>> {
    sampler.validate(sched.num_steps())?;
    data.iter()
        .map(|(x0, y)| {
            let t = sampler.draw(sched.num_steps(), rng);
            forward_sample(sched, x0, *y, t, rng)
        })
        .collect()
}

/// Per-sample gradient rows with their provenance.
#[derive(Debug, Clone)]
pub struct GradBatch {
    /// Exact per-sample gradients, one row per sample.
    pub rows: Vec<ParamVector>,
    /// Index of each row in the originating batch.
    pub sample_ids: Vec<usize>,
    /// Timestep each sample was diffused to.
    pub timesteps: Vec<usize>,
}

impl GradBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Everything the denoising loss produces for one batch.
#[derive(Debug, Clone)]
pub struct DsmOutput {
    /// Mean over the batch of 0.5 * ||eps - eps_hat||^2.
    pub loss: f64,
    /// Gradient of that mean.
    pub grad: ParamVector,
    /// Exact per-sample gradient rows.
    pub per_sample: GradBatch,
}

fn sample_loss_and_deps(net: &DenoiserNet, s: &DiffusionSample) -> Result<(f64, Vec<f64>, crate::net::ForwardCache)> {
    let (eps_hat, cache) = net.forward(&s.x_t, s.t, s.y)?;
    let mut loss = 0.0;
    let mut d_eps = vec![0.0; eps_hat.len()];
    for k in 0..eps_hat.len() {
        let diff = eps_hat[k] - s.eps[k];
        loss += 0.5 * diff * diff;
        d_eps[k] = diff;
    }
    Ok((loss, d_eps, cache))
}

/// Batch loss and gradient only — the training-loop workhorse. Each sample's
/// contribution is scaled by 1/B as it is accumulated.
pub fn dsm_batch_grad(net: &DenoiserNet, samples: &[DiffusionSample]) -> Result<(f64, ParamVector)> {
    if samples.is_empty() {
        return Err(Error::Usage("denoising loss needs a non-empty batch".into()));
    }
    let w = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut grad = ParamVector::zeros(net.params().layout().clone());
    for (i, s) in samples.iter().enumerate() {
        let (l, d_eps, cache) = sample_loss_and_deps(net, s)
            .map_err(|e| Error::Numeric(format!("sample {}: {}", i, e)))?;
        loss += w * l;
        net.backward(&cache, &d_eps, w, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Per-sample losses and exact gradient rows for pre-diffused samples.
pub fn dsm_per_sample(net: &DenoiserNet, samples: &[DiffusionSample]) -> Result<(Vec<f64>, GradBatch)> {
    if samples.is_empty() {
        return Err(Error::Usage("denoising loss needs a non-empty batch".into()));
    }
    let mut losses = Vec::with_capacity(samples.len());
    let mut rows = Vec::with_capacity(samples.len());
    let mut sample_ids = Vec::with_capacity(samples.len());
    let mut timesteps = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (l, d_eps, cache) = sample_loss_and_deps(net, s)
            .map_err(|e| Error::Numeric(format!("sample {}: {}", i, e)))?;
        losses.push(l);
        rows.push(net.per_sample_grad(&cache, &d_eps)?);
        sample_ids.push(i);
        timesteps.push(s.t);
    }
    Ok((losses, GradBatch { rows, sample_ids, timesteps }))
}

/// Full denoising-loss evaluation: draws timesteps and noise, then returns
/// the batch loss, its gradient, and all per-sample rows.
pub fn dsm_loss(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    data: &[(Vec<f64>, Option<usize>)],
    sampler: TimestepSampler,
    rng: &mut ChaCha12Rng,
) -> Result<DsmOutput> {
    let samples = prepare_batch(sched, data, sampler, rng)?;
    let (loss, grad) = dsm_batch_grad(net, &samples)?;
    let (_, per_sample) = dsm_per_sample(net, &samples)?;
    Ok(DsmOutput { loss, grad, per_sample })
}

/// score = -eps_hat / sqrt(1 - abar).
pub fn eps_to_score(eps_hat: &[f64], abar: f64) -> Result<Vec<f64>> {
    if !(abar > 0.0 && abar < 1.0) {
        return Err(Error::Numeric(format!(
            "noise/score conversion needs 0 < abar < 1, got {}",
            abar
        )));
    }
    let scale = -1.0 / (1.0 - abar).sqrt();
    Ok(eps_hat.iter().map(|e| scale * e).collect())
}

/// Inverse of `eps_to_score`: eps_hat = -sqrt(1 - abar) * score.
pub fn score_to_eps(score: &[f64], abar: f64) -> Result<Vec<f64>> {
    if !(abar > 0.0 && abar < 1.0) {
        return Err(Error::Numeric(format!(
            "noise/score conversion needs 0 < abar < 1, got {}",
            abar
        )));
    }
    let scale = -(1.0 - abar).sqrt();
    Ok(score.iter().map(|s| scale * s).collect())
}

/// Evenly spaced reverse-pass timesteps: round(i*N/steps) for i = 1..=steps,
/// always ending at N. Returned in increasing order.
pub fn ddim_timesteps(num_steps: usize, substeps: usize) -> Result<Vec<usize>> {
    if substeps == 0 || substeps > num_steps {
        return Err(Error::Config(format!(
            "sampler steps must be in 1..={}, got {}",
            num_steps, substeps
        )));
    }
    let taus: Vec<usize> = (1..=substeps)
        .map(|i| ((i * num_steps) as f64 / substeps as f64).round() as usize)
        .collect();
    debug_assert!(taus.windows(2).all(|w| w[0] < w[1]));
    debug_assert_eq!(*taus.last().unwrap(), num_steps);
    Ok(taus)
}

/// Deterministic reverse diffusion from a caller-supplied starting point.
pub fn ddim_sample_from<P: NoisePredictor + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    substeps: usize,
    y: Option<usize>,
    x_init: Vec<f64>,
) -> Result<Vec<f64>> {
    let taus = ddim_timesteps(sched.num_steps(), substeps)?;
    let mut x = x_init;
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let t_prev = if i == 0 { 0 } else { taus[i - 1] };
        let eps_hat = predictor.predict_noise(&x, t, y)?;
        let abar_t = sched.abar(t)?;
        let abar_prev = sched.abar(t_prev)?;
        let sn_t = (1.0 - abar_t).sqrt();
        let sa_t = abar_t.sqrt();
        let sa_prev = abar_prev.sqrt();
        let sn_prev = (1.0 - abar_prev).sqrt();
        for k in 0..x.len() {
            let x0_hat = (x[k] - sn_t * eps_hat[k]) / sa_t;
            x[k] = sa_prev * x0_hat + sn_prev * eps_hat[k];
        }
        if !all_finite(&x) {
            return Err(Error::Numeric(format!(
                "non-finite value during reverse pass at timestep {}",
                t
            )));
        }
    }
    Ok(x)
}

/// Deterministic reverse diffusion from a fresh standard-normal start.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    substeps: usize,
    y: Option<usize>,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    let x_init = standard_normal_vec(predictor.dim(), rng);
    ddim_sample_from(predictor, sched, substeps, y, x_init)
}

/// A predictor that knows the clean point and returns the exact noise
/// separating any query from it: eps = (x_t - sqrt(abar)*x0)/sqrt(1-abar).
/// Used to validate samplers against the algebraic fixed point.
pub struct OraclePredictor<'a> {
    pub x0: Vec<f64>,
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for OraclePredictor<'_> {
    fn predict_noise(&self, x_t: &[f64], t: usize, _y: Option<usize>) -> Result<Vec<f64>> {
        let abar = self.sched.abar(t)?;
        let sa = abar.sqrt();
        let sn = (1.0 - abar).sqrt();
        Ok(x_t.iter().zip(&self.x0).map(|(x, x0)| (x - sa * x0) / sn).collect())
    }

    fn dim(&self) -> usize {
        self.x0.len()
    }
}

/// Mean over pre-diffused samples of ||x_t - sqrt(1-abar_t)*eps_hat||^2 / d.
/// Small values mean the model is just returning (a scaling of) its input.
pub fn identity_map_mse_on(net: &DenoiserNet, sched: &NoiseSchedule, samples: &[DiffusionSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("diagnostic needs a non-empty batch".into()));
    }
    let d = net.dim() as f64;
    let mut total = 0.0;
    for s in samples {
        let eps_hat = net.predict_noise(&s.x_t, s.t, s.y)?;
        let sn = (1.0 - sched.abar(s.t)?).sqrt();
        let mut err = 0.0;
        for k in 0..s.x_t.len() {
            let diff = s.x_t[k] - sn * eps_hat[k];
            err += diff * diff;
        }
        total += err / d;
    }
    Ok(total / samples.len() as f64)
}

/// Diffuses the batch to the single timestep `t` and reports the diagnostic.
pub fn identity_map_mse(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    data: &[(Vec<f64>, Option<usize>)],
    t: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let samples: Vec<DiffusionSample> = data
        .iter()
        .map(|(x0, y)| forward_sample(sched, x0, *y, t, rng))
        .collect::<Result<_>>()?;
    identity_map_mse_on(net, sched, &samples)
}
