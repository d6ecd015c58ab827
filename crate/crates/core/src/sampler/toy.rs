//! Small denoisers for tests and demos.

use crate::dataset::tokenize;
use crate::error::{Error, Result};
use crate::injector::{
    encode_entities, encode_poses, fuse_entity_pose, stack_pose_embeddings, toy_dit_block, DitBlockWeights,
    InjectorParams, InjectorPlacement,
};
use crate::pose::PoseSequence;
use crate::tensor::Tensor;

use super::{Denoiser, EntityTrajectory, StepInfo};

/// `ε̂(x) = k·x`, with a gain that depends only on which conditions are
/// present, so sampling has a closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDenoiser {
    pub k_base: f64,
    pub k_text: f64,
    pub k_pair: f64,
    pub k_lora: f64,
}

impl Default for LinearDenoiser {
    fn default() -> Self {
        Self {
            k_base: 0.5,
            k_text: 0.1,
            k_pair: 0.05,
            k_lora: 0.02,
        }
    }
}

impl LinearDenoiser {
    pub fn conditioned_gain(&self, has_text: bool, pairs: usize, alpha_lora: f64) -> f64 {
        self.base_gain(has_text) + pairs as f64 * self.k_pair + alpha_lora * self.k_lora
    }

    pub fn base_gain(&self, has_text: bool) -> f64 {
        self.k_base + if has_text { self.k_text } else { 0.0 }
    }
}

fn scaled(x: &Tensor, k: f64) -> Result<Tensor> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| k * v).collect())
}

impl Denoiser for LinearDenoiser {
    fn conditioned(
        &mut self,
        x: &Tensor,
        _: &StepInfo,
        text: &str,
        pairs: &[EntityTrajectory],
        alpha_lora: f64,
    ) -> Result<Tensor> {
        scaled(x, self.conditioned_gain(!text.is_empty(), pairs.len(), alpha_lora))
    }

    fn base(&mut self, x: &Tensor, _: &StepInfo, text: &str) -> Result<Tensor> {
        scaled(x, self.base_gain(!text.is_empty()))
    }
}

/// What a denoiser was asked to do.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedCall {
    pub conditioned: bool,
    pub step: usize,
    pub text: String,
    pub trajectories: Vec<PoseSequence>,
    pub alpha_lora: Option<f64>,
}

/// Passes calls through to `inner` and keeps a log of them.
#[derive(Debug, Clone)]
pub struct RecordingDenoiser<D> {
    pub inner: D,
    pub calls: Vec<RecordedCall>,
}

impl<D> RecordingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: Vec::new(),
        }
    }

    pub fn conditioned_calls(&self) -> usize {
        self.calls.iter().filter(|c| c.conditioned).count()
    }

    pub fn base_calls(&self) -> usize {
        self.calls.iter().filter(|c| !c.conditioned).count()
    }
}

impl<D: Denoiser> Denoiser for RecordingDenoiser<D> {
    fn conditioned(
        &mut self,
        x: &Tensor,
        step: &StepInfo,
        text: &str,
        pairs: &[EntityTrajectory],
        alpha_lora: f64,
    ) -> Result<Tensor> {
        self.calls.push(RecordedCall {
            conditioned: true,
            step: step.step,
            text: text.to_string(),
            trajectories: pairs.iter().map(|p| p.trajectory.clone()).collect(),
            alpha_lora: Some(alpha_lora),
        });
        self.inner.conditioned(x, step, text, pairs, alpha_lora)
    }

    fn base(&mut self, x: &Tensor, step: &StepInfo, text: &str) -> Result<Tensor> {
        self.calls.push(RecordedCall {
            conditioned: false,
            step: step.step,
            text: text.to_string(),
            trajectories: Vec::new(),
            alpha_lora: None,
        });
        self.inner.base(x, step, text)
    }
}

/// One toy DiT block used as the noise predictor. Text enters as the mean
/// token embedding added to every video token; trajectories enter through
/// the injector after the spatial layer.
#[derive(Debug, Clone)]
pub struct ToyDitDenoiser {
    pub base: DitBlockWeights,
    pub params: InjectorParams,
}

impl ToyDitDenoiser {
    fn with_text(&self, x: &Tensor, text: &str) -> Result<Tensor> {
        let d = self.base.dim();
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Ok(x.clone());
        }
        let tokens: Vec<String> = tokens.into_iter().take(crate::injector::L_MAX).collect();
        let n = tokens.len() as f64;
        let z = encode_entities(&[tokens], d)?;
        let mut bias = vec![0.0; d];
        for row in z.data().chunks(d) {
            for (b, v) in bias.iter_mut().zip(row) {
                *b += v / n;
            }
        }
        let data = x.data().iter().enumerate().map(|(i, v)| v + bias[i % d]).collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

impl Denoiser for ToyDitDenoiser {
    fn conditioned(
        &mut self,
        x: &Tensor,
        step: &StepInfo,
        text: &str,
        pairs: &[EntityTrajectory],
        alpha_lora: f64,
    ) -> Result<Tensor> {
        let params = InjectorParams {
            lora_alpha: alpha_lora,
            ..self.params.clone()
        };
        let conditions = if pairs.is_empty() {
            None
        } else {
            let prompts: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(&p.prompt)).collect();
            let z_e = encode_entities(&prompts, self.base.dim())?;
            let z_p = pairs
                .iter()
                .map(|p| encode_poses(&p.trajectory, &params))
                .collect::<Result<Vec<_>>>()?;
            let fused = fuse_entity_pose(&z_e, &stack_pose_embeddings(&z_p)?)?;
            if fused.shape()[0] != x.shape()[0] {
                return Err(Error::LengthMismatch {
                    expected: x.shape()[0],
                    found: fused.shape()[0],
                });
            }
            Some(fused)
        };
        let h = self.with_text(x, text)?;
        toy_dit_block(
            &h,
            conditions.as_ref(),
            step.timestep as f64,
            &self.base,
            Some(&params),
            InjectorPlacement::After2d,
        )
    }

    fn base(&mut self, x: &Tensor, step: &StepInfo, text: &str) -> Result<Tensor> {
        let h = self.with_text(x, text)?;
        toy_dit_block(
            &h,
            None,
            step.timestep as f64,
            &self.base,
            None,
            InjectorPlacement::NoInjector,
        )
    }
}
