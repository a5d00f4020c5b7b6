//! Diffusion mathematics: linear variance schedule, closed-form forward
//! noising, the two training objectives and the guided ancestral sampler.
//!
//! Timesteps are 1-based throughout (`t` in `1..=T`).

use ndarray::{Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear beta schedule with cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Serializable description of a schedule (`schedule.json`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_1: f64,
    #[serde(rename = "beta_T")]
    pub beta_t: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_1: 1e-4,
            beta_t: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_1, self.beta_t)
    }
}

/// Betas linearly spaced from `beta_1` to `beta_t` inclusive.
pub fn make_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("need T >= 2, got {steps}")));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64)
        .collect();
    Ok(DiffusionSchedule::from_betas_unchecked(
        ScheduleSpec {
            steps,
            beta_1,
            beta_t,
        },
        betas,
    ))
}

impl DiffusionSchedule {
    /// Schedule from explicit betas (each in `(0, 1)`).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument(
                "betas must number at least two and lie in (0, 1)".into(),
            ));
        }
        let spec = ScheduleSpec {
            steps: betas.len(),
            beta_1: betas[0],
            beta_t: betas[betas.len() - 1],
        };
        Ok(Self::from_betas_unchecked(spec, betas))
    }

    fn from_betas_unchecked(spec: ScheduleSpec, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            spec,
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

fn same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(
    x0: ArrayView2<f64>,
    t: usize,
    eps: ArrayView2<f64>,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    same_shape(&x0, &eps, "q_sample")?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(&x0).and(&eps).map_collect(|&x, &e| a * x + b * e))
}

fn mse(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &str) -> Result<f64> {
    same_shape(&a, &b, what)?;
    if a.is_empty() {
        return Err(Error::Shape(format!("{what}: empty tensors")));
    }
    let sum: f64 = Zip::from(&a).and(&b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
    Ok(sum / a.len() as f64)
}

/// Mean squared error between predicted and true noise.
pub fn noise_loss(eps_hat: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<f64> {
    mse(eps_hat, eps, "noise_loss")
}

/// Mean squared error between the predicted and the clean sequence.
pub fn sample_loss(x_hat: ArrayView2<f64>, x0: ArrayView2<f64>) -> Result<f64> {
    mse(x_hat, x0, "sample_loss")
}

/// Classifier-free guidance `eps_u + s (eps_c - eps_u)`.
///
/// Evaluated as `(1 - s) eps_u + s eps_c` so that `s = 0` and `s = 1`
/// reproduce the unconditional and conditional inputs bit for bit.
pub fn guided_noise(
    eps_cond: ArrayView2<f64>,
    eps_uncond: ArrayView2<f64>,
    s: f64,
) -> Result<Array2<f64>> {
    same_shape(&eps_cond, &eps_uncond, "guided_noise")?;
    let keep = 1.0 - s;
    Ok(Zip::from(&eps_cond)
        .and(&eps_uncond)
        .map_collect(|&c, &u| keep * u + s * c))
}

/// Converts a clean-sample prediction into the equivalent noise prediction
/// at step `t`.
pub fn eps_from_sample(
    x_t: ArrayView2<f64>,
    x_hat: ArrayView2<f64>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    same_shape(&x_t, &x_hat, "eps_from_sample")?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(&x_t).and(&x_hat).map_collect(|&x, &xh| (x - a * xh) / b))
}

/// Inverse of [`eps_from_sample`].
pub fn sample_from_eps(
    x_t: ArrayView2<f64>,
    eps_hat: ArrayView2<f64>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    same_shape(&x_t, &eps_hat, "sample_from_eps")?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(&x_t).and(&eps_hat).map_collect(|&x, &e| (x - b * e) / a))
}

/// One ancestral step
/// `x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sqrt(beta_t) noise`.
///
/// `noise` is ignored at `t = 1`.
pub fn p_sample_step(
    x_t: ArrayView2<f64>,
    t: usize,
    eps_hat: ArrayView2<f64>,
    sched: &DiffusionSchedule,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    same_shape(&x_t, &eps_hat, "p_sample_step")?;
    same_shape(&x_t, &noise, "p_sample_step noise")?;
    sched.check_t(t)?;
    let beta = sched.beta(t);
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = if t > 1 { beta.sqrt() } else { 0.0 };
    Ok(Zip::from(&x_t)
        .and(&eps_hat)
        .and(&noise)
        .map_collect(|&x, &e, &z| {
            let mean = inv_sqrt_alpha * (x - eps_coef * e);
            if t > 1 {
                mean + sigma * z
            } else {
                mean
            }
        }))
}

/// What the network regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    /// Noise `eps` (the default objective).
    #[default]
    Noise,
    /// The clean sequence `x0`.
    Sample,
}

impl std::str::FromStr for PredictionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "sample" => Ok(Self::Sample),
            other => Err(Error::InvalidArgument(format!(
                "prediction mode must be 'noise' or 'sample', got '{other}'"
            ))),
        }
    }
}

/// Conditioning `c`: the first `M` normalized keypoint frames and the
/// aligned audio features, or the null context.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningContext {
    /// `M x 2K` normalized keypoints.
    pub init_frames: Array2<f64>,
    /// `N x A` audio features.
    pub audio: Array2<f64>,
    pub is_null: bool,
}

impl ConditioningContext {
    pub fn new(init_frames: Array2<f64>, audio: Array2<f64>) -> Self {
        Self {
            init_frames,
            audio,
            is_null: false,
        }
    }

    /// The unconditional context. Consumers never read its arrays.
    pub fn null() -> Self {
        Self {
            init_frames: Array2::zeros((0, 0)),
            audio: Array2::zeros((0, 0)),
            is_null: true,
        }
    }
}

/// Anything that predicts noise (or clean samples) for a batch of noisy
/// sequences sharing one timestep.
pub trait DenoiseModel {
    fn prediction_mode(&self) -> PredictionMode {
        PredictionMode::Noise
    }

    fn predict(
        &self,
        x_t: &[ArrayView2<f64>],
        t: usize,
        contexts: &[&ConditioningContext],
    ) -> Result<Vec<Array2<f64>>>;
}

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    /// Clamp the implied `x0` to `[-c, c]` at every step. Off by default.
    pub clamp_x0: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 0.2,
            clamp_x0: None,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Full guided reverse pass from `x_T ~ N(0, I)` for one context.
pub fn sample<D: DenoiseModel + ?Sized>(
    model: &D,
    context: &ConditioningContext,
    shape: (usize, usize),
    sampler: &SamplerConfig,
    seed: u64,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    let mut out = sample_batch(model, &[context], shape, sampler, &[seed], sched)?;
    Ok(out.pop().expect("one sample per context"))
}

/// Independent reverse passes for several contexts, evaluated as one batch.
///
/// Sample `i` draws all of its randomness from `seeds[i]`, so results do not
/// depend on how requests are batched.
pub fn sample_batch<D: DenoiseModel + ?Sized>(
    model: &D,
    contexts: &[&ConditioningContext],
    shape: (usize, usize),
    sampler: &SamplerConfig,
    seeds: &[u64],
    sched: &DiffusionSchedule,
) -> Result<Vec<Array2<f64>>> {
    if contexts.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} contexts but {} seeds",
            contexts.len(),
            seeds.len()
        )));
    }
    let b = contexts.len();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut xs: Vec<Array2<f64>> = rngs.iter_mut().map(|r| gaussian(r, shape)).collect();
    let null = ConditioningContext::null();
    // a branch with zero weight is skipped; the blend then reproduces the
    // other branch exactly
    let s = sampler.guidance_scale;
    let mut all_ctx: Vec<&ConditioningContext> = Vec::with_capacity(2 * b);
    if s != 0.0 {
        all_ctx.extend_from_slice(contexts);
    }
    if s != 1.0 {
        all_ctx.extend(std::iter::repeat_n(&null, b));
    }
    let branches = all_ctx.len() / b.max(1);
    let mode = model.prediction_mode();

    for t in (1..=sched.num_steps()).rev() {
        let views: Vec<ArrayView2<f64>> = (0..branches).flat_map(|_| xs.iter().map(|x| x.view())).collect();
        let mut preds = model.predict(&views, t, &all_ctx)?;
        if preds.len() != all_ctx.len() {
            return Err(Error::Shape(format!(
                "model returned {} predictions for {} inputs",
                preds.len(),
                all_ctx.len()
            )));
        }
        if mode == PredictionMode::Sample {
            for (i, p) in preds.iter_mut().enumerate() {
                *p = eps_from_sample(xs[i % b].view(), p.view(), t, sched)?;
            }
        }
        let (c_off, u_off) = if branches == 2 { (0, b) } else { (0, 0) };
        for i in 0..b {
            let mut eps = guided_noise(preds[c_off + i].view(), preds[u_off + i].view(), s)?;
            if let Some(c) = sampler.clamp_x0 {
                let x0 = sample_from_eps(xs[i].view(), eps.view(), t, sched)?.mapv(|v| v.clamp(-c, c));
                eps = eps_from_sample(xs[i].view(), x0.view(), t, sched)?;
            }
            let noise = if t > 1 {
                gaussian(&mut rngs[i], shape)
            } else {
                Array2::zeros(shape)
            };
            xs[i] = p_sample_step(xs[i].view(), t, eps.view(), sched, noise.view())?;
        }
    }
    Ok(xs)
}
