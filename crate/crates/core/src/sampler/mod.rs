//! Annealed conditional sampling with classifier-free guidance.
//!
//! For the first `T_c` respaced steps the denoiser sees the entity-trajectory
//! pairs (with the LoRA adaptor at strength `alpha_lora`); afterwards the
//! frozen base model runs plain text guidance. Updates are DDIM, with an
//! optional `eta` for ancestral noise.

mod toy;

pub use toy::{LinearDenoiser, RecordedCall, RecordingDenoiser, ToyDitDenoiser};

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pose::PoseSequence;
use crate::tensor::Tensor;

pub const TRAIN_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 12.5;
pub const DEFAULT_ANNEAL_STEP: usize = 25;
pub const DEFAULT_LORA_ALPHA: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub train_steps: usize,
    pub steps: usize,
    /// Guidance strength `w`.
    pub guidance: f64,
    /// Number of leading steps that see the trajectories (`T_c`).
    pub anneal_step: usize,
    pub alpha_lora: f64,
    /// 0 gives deterministic DDIM.
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            train_steps: TRAIN_STEPS,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            anneal_step: DEFAULT_ANNEAL_STEP,
            alpha_lora: DEFAULT_LORA_ALPHA,
            eta: 0.0,
        }
    }
}

/// Noise level of one sampling step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// 1-based step number; step 1 is the noisiest.
    pub step: usize,
    /// Index into the training schedule.
    pub timestep: usize,
    pub alpha: f64,
    pub sigma: f64,
}

/// A respaced variance-preserving schedule, `α² + σ² = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSchedule {
    pub config: SamplerConfig,
    /// Training timesteps kept by respacing, ascending.
    pub timesteps: Vec<usize>,
    /// Per kept timestep, ascending like `timesteps`.
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

/// Linear-β schedule over `train_steps`, respaced with a uniform stride.
pub fn make_schedule(config: &SamplerConfig) -> Result<SamplerSchedule> {
    let t = config.train_steps;
    if t < 2 {
        return Err(Error::validation("train_steps", "must be >= 2"));
    }
    if config.steps == 0 || config.steps > t {
        return Err(Error::OutOfRange {
            what: "steps",
            value: config.steps as f64,
            min: 1.0,
            max: t as f64,
        });
    }
    if config.anneal_step > config.steps {
        return Err(Error::OutOfRange {
            what: "anneal_step",
            value: config.anneal_step as f64,
            min: 0.0,
            max: config.steps as f64,
        });
    }
    if !(config.guidance.is_finite() && config.guidance >= 0.0) {
        return Err(Error::validation("guidance", "must be finite and >= 0"));
    }
    if !(config.alpha_lora.is_finite() && config.alpha_lora >= 0.0) {
        return Err(Error::validation("alpha_lora", "must be finite and >= 0"));
    }
    if !(0.0..=1.0).contains(&config.eta) {
        return Err(Error::validation("eta", "must lie in [0, 1]"));
    }
    let mut alpha_bar = Vec::with_capacity(t);
    let mut acc = 1.0;
    for i in 0..t {
        let beta = BETA_START + (BETA_END - BETA_START) * i as f64 / (t - 1) as f64;
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    let timesteps: Vec<usize> = (0..config.steps).map(|i| i * t / config.steps).collect();
    let alphas = timesteps.iter().map(|&i| alpha_bar[i].sqrt()).collect();
    let sigmas = timesteps.iter().map(|&i| (1.0 - alpha_bar[i]).sqrt()).collect();
    Ok(SamplerSchedule {
        config: config.clone(),
        timesteps,
        alphas,
        sigmas,
    })
}

impl SamplerSchedule {
    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    /// Noise level at 1-based `step`, counting from the noisiest.
    pub fn step_info(&self, step: usize) -> StepInfo {
        let k = self.steps() - step;
        StepInfo {
            step,
            timestep: self.timesteps[k],
            alpha: self.alphas[k],
            sigma: self.sigmas[k],
        }
    }
}

/// `(1 + w)·ε_cond − w·ε_uncond`, evaluated as `ε_cond + w·(ε_cond − ε_uncond)`
/// so equal inputs come back unchanged.
pub fn cfg_epsilon(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::shape(
            "cfg_epsilon",
            format!("{:?} vs {:?}", eps_cond.shape(), eps_uncond.shape()),
        ));
    }
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(c, u)| c + w * (c - u))
        .collect();
    Tensor::new(eps_cond.shape().to_vec(), data)
}

/// An entity description bound to its trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityTrajectory {
    pub prompt: String,
    pub trajectory: PoseSequence,
}

/// Noise predictors used by the sampler. Both return a tensor shaped like
/// `x`. Taking `&mut self` lets instrumented denoisers record calls.
pub trait Denoiser {
    /// Base model with injector and LoRA adaptor.
    fn conditioned(
        &mut self,
        x: &Tensor,
        step: &StepInfo,
        text: &str,
        pairs: &[EntityTrajectory],
        alpha_lora: f64,
    ) -> Result<Tensor>;

    /// Frozen base model.
    fn base(&mut self, x: &Tensor, step: &StepInfo, text: &str) -> Result<Tensor>;
}

/// Negative branch of guidance while trajectories are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeMode {
    /// No text and no pairs.
    Uncond,
    /// No text; each trajectory frozen at its first pose.
    StaticPose,
    /// No text; the positive trajectories unchanged.
    PositivePose,
}

impl FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncond" => Ok(Self::Uncond),
            "static_pose" => Ok(Self::StaticPose),
            "positive_pose" => Ok(Self::PositivePose),
            _ => Err(Error::validation("negative_mode", format!("unknown mode {s:?}"))),
        }
    }
}

/// Wraps a denoiser that predicts `v = α·ε − σ·x₀` so that it predicts ε,
/// using `ε = α·v + σ·x_t`. This is the `c_out·F(c_in·x) + c_skip·x`
/// preconditioning with `c_in = 1`, `c_out = α`, `c_skip = σ`.
#[derive(Debug, Clone)]
pub struct VPrediction<D>(pub D);

fn v_to_eps(v: Tensor, x: &Tensor, step: &StepInfo) -> Result<Tensor> {
    let data = v
        .data()
        .iter()
        .zip(x.data())
        .map(|(v, x)| step.alpha * v + step.sigma * x)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

impl<D: Denoiser> Denoiser for VPrediction<D> {
    fn conditioned(
        &mut self,
        x: &Tensor,
        step: &StepInfo,
        text: &str,
        pairs: &[EntityTrajectory],
        alpha_lora: f64,
    ) -> Result<Tensor> {
        let v = self.0.conditioned(x, step, text, pairs, alpha_lora)?;
        v_to_eps(v, x, step)
    }

    fn base(&mut self, x: &Tensor, step: &StepInfo, text: &str) -> Result<Tensor> {
        let v = self.0.base(x, step, text)?;
        v_to_eps(v, x, step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// The final clean estimate.
    pub x0: Tensor,
    pub conditioned_steps: usize,
    pub base_steps: usize,
}

fn checked(out: Result<Tensor>, x: &Tensor, step: usize) -> Result<Tensor> {
    let out = out.map_err(|e| match e {
        Error::NonFinite { .. } => Error::DenoiserNonFinite { step },
        other => other,
    })?;
    if out.shape() != x.shape() {
        return Err(Error::shape(
            "denoiser",
            format!("returned {:?} for input {:?}", out.shape(), x.shape()),
        ));
    }
    if !out.is_finite() {
        return Err(Error::DenoiserNonFinite { step });
    }
    Ok(out)
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Runs the annealed sampler from seeded Gaussian noise of `shape`.
pub fn annealed_sample<D: Denoiser + ?Sized>(
    denoiser: &mut D,
    schedule: &SamplerSchedule,
    text: &str,
    pairs: &[EntityTrajectory],
    negative: NegativeMode,
    shape: &[usize],
    seed: u64,
) -> Result<SampleOutput> {
    if pairs.len() > crate::traj::MAX_ENTITIES {
        return Err(Error::OutOfRange {
            what: "entity-trajectory pairs",
            value: pairs.len() as f64,
            min: 0.0,
            max: crate::traj::MAX_ENTITIES as f64,
        });
    }
    let cfg = &schedule.config;
    let negative_pairs: Vec<EntityTrajectory> = match negative {
        NegativeMode::Uncond => Vec::new(),
        NegativeMode::StaticPose => pairs
            .iter()
            .map(|p| EntityTrajectory {
                prompt: p.prompt.clone(),
                trajectory: p.trajectory.frozen_at_first(),
            })
            .collect(),
        NegativeMode::PositivePose => pairs.to_vec(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::new(shape.to_vec(), gaussian(shape, &mut rng))?;
    let (mut conditioned_steps, mut base_steps) = (0, 0);
    let steps = schedule.steps();
    for step in 1..=steps {
        let info = schedule.step_info(step);
        let eps = if step <= cfg.anneal_step {
            conditioned_steps += 1;
            let c = checked(denoiser.conditioned(&x, &info, text, pairs, cfg.alpha_lora), &x, step)?;
            let u = checked(
                denoiser.conditioned(&x, &info, "", &negative_pairs, cfg.alpha_lora),
                &x,
                step,
            )?;
            cfg_epsilon(&c, &u, cfg.guidance)?
        } else {
            base_steps += 1;
            let c = checked(denoiser.base(&x, &info, text), &x, step)?;
            let u = checked(denoiser.base(&x, &info, ""), &x, step)?;
            cfg_epsilon(&c, &u, cfg.guidance)?
        };
        let x0: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(x, e)| (x - info.sigma * e) / info.alpha)
            .collect();
        if step == steps {
            let x0 = Tensor::new(shape.to_vec(), x0).map_err(|_| Error::DenoiserNonFinite { step })?;
            return Ok(SampleOutput {
                x0,
                conditioned_steps,
                base_steps,
            });
        }
        let next = schedule.step_info(step + 1);
        let s = cfg.eta
            * (next.sigma / info.sigma)
            * (1.0 - (info.alpha * info.alpha) / (next.alpha * next.alpha))
                .max(0.0)
                .sqrt();
        let dir = (next.sigma * next.sigma - s * s).max(0.0).sqrt();
        let noise = if s > 0.0 {
            gaussian(shape, &mut rng)
        } else {
            vec![0.0; x0.len()]
        };
        let data: Vec<f64> = x0
            .iter()
            .zip(eps.data())
            .zip(&noise)
            .map(|((x0, e), z)| next.alpha * x0 + dir * e + s * z)
            .collect();
        x = Tensor::new(shape.to_vec(), data).map_err(|_| Error::DenoiserNonFinite { step })?;
    }
    unreachable!("the loop returns at the last step")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{Pose6DoF, Vec3};

    fn cfg(steps: usize, anneal: usize) -> SamplerConfig {
        SamplerConfig {
            steps,
            anneal_step: anneal,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_shape() {
        let s = make_schedule(&SamplerConfig::default()).unwrap();
        assert_eq!(s.timesteps, (0..50).map(|i| 20 * i).collect::<Vec<_>>());
        for (a, g) in s.alphas.iter().zip(&s.sigmas) {
            assert!((a * a + g * g - 1.0).abs() < 1e-12);
        }
        assert!(s.sigmas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.step_info(1).sigma > 0.999 && s.step_info(50).sigma < 0.011);
        let full = make_schedule(&cfg(1000, 0)).unwrap();
        assert_eq!(full.timesteps, (0..1000).collect::<Vec<_>>());
        assert!(make_schedule(&cfg(1001, 0)).is_err());
        assert!(make_schedule(&cfg(10, 11)).is_err());
    }

    #[test]
    fn guidance_arithmetic() {
        let one = Tensor::new(vec![1], vec![1.0]).unwrap();
        let zero = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert_eq!(cfg_epsilon(&one, &zero, 12.5).unwrap().data(), [13.5]);
        assert_eq!(cfg_epsilon(&one, &zero, 0.0).unwrap().data(), [1.0]);
        let x = Tensor::new(vec![2], vec![0.3, -1.7]).unwrap();
        assert_eq!(cfg_epsilon(&x, &x, 7.0).unwrap().max_abs_diff(&x), 0.0);
        assert!(cfg_epsilon(&one, &x, 1.0).is_err());
    }

    fn pairs() -> Vec<EntityTrajectory> {
        let poses = (0..9)
            .map(|i| Pose6DoF::from_yaw(5.0 * i as f64, Vec3::new(0.1 * i as f64, 0.0, 0.0)))
            .collect();
        vec![EntityTrajectory {
            prompt: "a man".into(),
            trajectory: PoseSequence::new(20.0, poses).unwrap(),
        }]
    }

    #[test]
    fn branch_counts() {
        for t_c in [0, 5, 25, 50] {
            let s = make_schedule(&cfg(50, t_c)).unwrap();
            let mut d = RecordingDenoiser::new(LinearDenoiser::default());
            let out = annealed_sample(&mut d, &s, "a man walks", &pairs(), NegativeMode::Uncond, &[4], 1).unwrap();
            assert_eq!(out.conditioned_steps, t_c);
            assert_eq!(out.base_steps, 50 - t_c);
            assert_eq!(d.conditioned_calls(), 2 * t_c);
            assert_eq!(d.base_calls(), 2 * (50 - t_c));
        }
    }

    #[test]
    fn static_pose_negatives_on_the_wire() {
        let s = make_schedule(&cfg(10, 10)).unwrap();
        let mut d = RecordingDenoiser::new(LinearDenoiser::default());
        annealed_sample(&mut d, &s, "a man walks", &pairs(), NegativeMode::StaticPose, &[4], 1).unwrap();
        let negatives: Vec<_> = d.calls.iter().filter(|c| c.conditioned && c.text.is_empty()).collect();
        assert_eq!(negatives.len(), 10);
        for c in negatives {
            for t in &c.trajectories {
                assert!(t.poses().iter().all(|p| p == t.first()));
            }
        }
    }

    // x_{k+1} = x_k · (α_{k+1}(1 − σ_k κ)/α_k + σ_{k+1} κ), then x̂₀ at the end
    fn closed_form(x: f64, s: &SamplerSchedule, kappa: impl Fn(usize) -> f64) -> f64 {
        let n = s.steps();
        let mut x = x;
        for step in 1..=n {
            let (a, g) = (s.step_info(step).alpha, s.step_info(step).sigma);
            let k = kappa(step);
            if step == n {
                return x * (1.0 - g * k) / a;
            }
            let (a2, g2) = (s.step_info(step + 1).alpha, s.step_info(step + 1).sigma);
            x *= a2 * (1.0 - g * k) / a + g2 * k;
        }
        unreachable!()
    }

    #[test]
    fn linear_denoiser_matches_closed_form() {
        let lin = LinearDenoiser::default();
        for t_c in [0, 7, 50] {
            let s = make_schedule(&cfg(50, t_c)).unwrap();
            let mut d = lin.clone();
            let out = annealed_sample(&mut d, &s, "text", &pairs(), NegativeMode::Uncond, &[3], 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x_t = gaussian(&[3], &mut rng);
            let w = s.config.guidance;
            for (i, &x) in x_t.iter().enumerate() {
                let expect = closed_form(x, &s, |step| {
                    if step <= t_c {
                        (1.0 + w) * lin.conditioned_gain(true, 1, s.config.alpha_lora)
                            - w * lin.conditioned_gain(false, 0, s.config.alpha_lora)
                    } else {
                        (1.0 + w) * lin.base_gain(true) - w * lin.base_gain(false)
                    }
                });
                let got = out.x0.data()[i];
                assert!(
                    (got - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                    "{got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn deterministic_and_eta_changes_path() {
        let s = make_schedule(&cfg(20, 10)).unwrap();
        let run = |s: &SamplerSchedule| {
            let mut d = LinearDenoiser::default();
            annealed_sample(&mut d, s, "t", &pairs(), NegativeMode::Uncond, &[2, 3], 4).unwrap()
        };
        assert_eq!(run(&s), run(&s));
        let mut c = s.config.clone();
        c.eta = 1.0;
        let noisy = make_schedule(&c).unwrap();
        assert_ne!(run(&noisy).x0, run(&s).x0);
        assert_eq!(run(&noisy), run(&noisy));
    }

    #[test]
    fn non_finite_output_aborts_with_step() {
        struct Bad;
        impl Denoiser for Bad {
            fn conditioned(
                &mut self,
                x: &Tensor,
                _: &StepInfo,
                _: &str,
                _: &[EntityTrajectory],
                _: f64,
            ) -> Result<Tensor> {
                Ok(x.clone())
            }
            fn base(&mut self, x: &Tensor, s: &StepInfo, _: &str) -> Result<Tensor> {
                let mut out = x.clone();
                if s.step == 4 {
                    out.data_mut()[0] = f64::NAN;
                }
                Ok(out)
            }
        }
        let s = make_schedule(&cfg(10, 2)).unwrap();
        let err = annealed_sample(&mut Bad, &s, "t", &[], NegativeMode::Uncond, &[2], 0).unwrap_err();
        assert!(matches!(err, Error::DenoiserNonFinite { step: 4 }), "{err}");
    }

    #[test]
    fn v_prediction_wrapper() {
        let s = make_schedule(&cfg(10, 0)).unwrap();
        let info = s.step_info(3);
        let x = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut d = VPrediction(LinearDenoiser::default());
        let eps = d.base(&x, &info, "").unwrap();
        let k = LinearDenoiser::default().base_gain(false);
        for (e, xv) in eps.data().iter().zip(x.data()) {
            assert!((e - (info.alpha * k * xv + info.sigma * xv)).abs() < 1e-15);
        }
    }
}
