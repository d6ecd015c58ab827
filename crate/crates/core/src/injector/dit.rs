//! A minimal DiT block hosting the injector.
//!
//! Order: timestep-scaled RMS norm, per-frame spatial attention, injector
//! (after the spatial layer by default), spatiotemporal attention over all
//! tokens, feed-forward. Every sublayer is residual.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    attention_forward, frame_conditions, gated_self_attention, lora_merge, normal_matrix, AttentionWeights,
    InjectorParams,
};
use crate::error::{Error, Result};
use crate::tensor::{EmbeddingTensor, Tensor};

/// Video tokens `(F̃, H̃, W̃, D)`.
pub type LatentVideo = Tensor;

pub const TIME_EMBED_DIM: usize = 8;
const RMS_EPS: f64 = 1e-6;

/// Where the injector sits inside the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectorPlacement {
    NoInjector,
    After2d,
    After3d,
}

impl FromStr for InjectorPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_injector" => Ok(Self::NoInjector),
            "after_2d" => Ok(Self::After2d),
            "after_3d" => Ok(Self::After3d),
            _ => Err(Error::validation("placement", format!("unknown placement {s:?}"))),
        }
    }
}

/// Frozen weights of the base block.
#[derive(Debug, Clone, PartialEq)]
pub struct DitBlockWeights {
    pub attn2d: AttentionWeights,
    pub attn3d: AttentionWeights,
    /// `hidden × D`.
    pub ffn_w1: DMatrix<f64>,
    pub ffn_b1: DVector<f64>,
    /// `D × hidden`.
    pub ffn_w2: DMatrix<f64>,
    pub ffn_b2: DVector<f64>,
    /// Maps the sinusoidal timestep embedding to a per-channel scale offset.
    pub time_w: DMatrix<f64>,
}

impl DitBlockWeights {
    /// Random weights with zero biases.
    pub fn random(d: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d as f64).sqrt();
        Self {
            attn2d: AttentionWeights::random(d, std, &mut rng),
            attn3d: AttentionWeights::random(d, std, &mut rng),
            ffn_w1: normal_matrix(hidden, d, std, &mut rng),
            ffn_b1: DVector::zeros(hidden),
            ffn_w2: normal_matrix(d, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng),
            ffn_b2: DVector::zeros(d),
            time_w: normal_matrix(d, TIME_EMBED_DIM, 0.1, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.attn2d.dim()
    }

    /// The matrices a LoRA adaptor may wrap, by name.
    pub fn lora_targets(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = Vec::new();
        for (layer, a) in [("attn2d", &self.attn2d), ("attn3d", &self.attn3d)] {
            for (n, m) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                out.push((format!("{layer}.{n}"), m));
            }
        }
        out.push(("ffn.w1".into(), &self.ffn_w1));
        out.push(("ffn.w2".into(), &self.ffn_w2));
        out
    }

    /// Copy with every wrapped matrix replaced by `W + α·A·Bᵀ`.
    pub fn with_lora(&self, params: &InjectorParams) -> Result<DitBlockWeights> {
        let mut out = self.clone();
        let alpha = params.lora_alpha;
        for (name, pair) in &params.lora {
            let slot = match name.as_str() {
                "attn2d.wq" => &mut out.attn2d.wq,
                "attn2d.wk" => &mut out.attn2d.wk,
                "attn2d.wv" => &mut out.attn2d.wv,
                "attn2d.wo" => &mut out.attn2d.wo,
                "attn3d.wq" => &mut out.attn3d.wq,
                "attn3d.wk" => &mut out.attn3d.wk,
                "attn3d.wv" => &mut out.attn3d.wv,
                "attn3d.wo" => &mut out.attn3d.wo,
                "ffn.w1" => &mut out.ffn_w1,
                "ffn.w2" => &mut out.ffn_w2,
                other => return Err(Error::validation("lora", format!("no base weight named {other}"))),
            };
            *slot = lora_merge(slot, &pair.a, &pair.b, alpha)?;
        }
        Ok(out)
    }
}

/// Sinusoidal embedding of a diffusion timestep.
pub fn timestep_embedding(t: f64) -> DVector<f64> {
    let half = TIME_EMBED_DIM / 2;
    DVector::from_fn(TIME_EMBED_DIM, |i, _| {
        let freq = 10_000f64.powf(-((i % half) as f64) / half as f64);
        if i < half {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

fn rms_norm(x: &DMatrix<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / d + RMS_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v / rms * scale[j];
        }
    }
    out
}

fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh())
}

fn apply_injector(
    x: &mut DMatrix<f64>,
    frames: usize,
    m: usize,
    conditions: Option<&EmbeddingTensor>,
    params: &InjectorParams,
) -> Result<()> {
    let d = x.ncols();
    for f in 0..frames {
        let cond = match conditions {
            Some(c) => frame_conditions(c, f),
            None => DMatrix::zeros(0, d),
        };
        let xf = x.rows(f * m, m).into_owned();
        let out = gated_self_attention(&xf, &cond, &params.attn, params.gate_gamma)?;
        x.rows_mut(f * m, m).copy_from(&out);
    }
    Ok(())
}

/// Runs one block over `x` at diffusion time `t`.
///
/// `params` supplies LoRA adaptors and the injector; without it the block
/// runs on its frozen weights and `placement` must be `NoInjector`.
/// `conditions` are the fused entity-pose tokens `(F̃, N, L, D)`.
pub fn toy_dit_block(
    x: &LatentVideo,
    conditions: Option<&EmbeddingTensor>,
    t: f64,
    base: &DitBlockWeights,
    params: Option<&InjectorParams>,
    placement: InjectorPlacement,
) -> Result<LatentVideo> {
    let s = x.shape();
    let d = base.dim();
    if s.len() != 4 || s[3] != d {
        return Err(Error::shape(
            "toy_dit_block",
            format!("latent {s:?} must be (F̃, H̃, W̃, {d})"),
        ));
    }
    let (frames, m) = (s[0], s[1] * s[2]);
    if let Some(c) = conditions {
        let cs = c.shape();
        if cs.len() != 4 || cs[0] != frames || cs[3] != d {
            return Err(Error::shape(
                "toy_dit_block",
                format!("conditions {cs:?} must be ({frames}, N, L, {d})"),
            ));
        }
    }
    if placement != InjectorPlacement::NoInjector && params.is_none() {
        return Err(Error::validation(
            "placement",
            "an injector placement needs injector parameters",
        ));
    }
    let w = match params {
        Some(p) => {
            p.validate()?;
            base.with_lora(p)?
        }
        None => base.clone(),
    };
    let scale = DVector::from_element(d, 1.0) + &w.time_w * timestep_embedding(t);

    let mut h = DMatrix::from_row_slice(frames * m, d, x.data());
    for f in 0..frames {
        let xf = h.rows(f * m, m).into_owned();
        let (y, _) = attention_forward(&rms_norm(&xf, &scale), None, &w.attn2d)?;
        h.rows_mut(f * m, m).copy_from(&(xf + y));
    }
    if placement == InjectorPlacement::After2d {
        apply_injector(&mut h, frames, m, conditions, params.expect("checked above"))?;
    }
    let (y, _) = attention_forward(&rms_norm(&h, &scale), None, &w.attn3d)?;
    h += y;
    if placement == InjectorPlacement::After3d {
        apply_injector(&mut h, frames, m, conditions, params.expect("checked above"))?;
    }
    let normed = rms_norm(&h, &scale);
    for (i, row) in normed.row_iter().enumerate() {
        let hidden = (&w.ffn_w1 * row.transpose() + &w.ffn_b1).map(gelu);
        let out = &w.ffn_w2 * hidden + &w.ffn_b2;
        for j in 0..d {
            h[(i, j)] += out[j];
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: "toy_dit_block output".into(),
        });
    }
    let mut data = Vec::with_capacity(h.len());
    for row in h.row_iter() {
        data.extend(row.iter());
    }
    Tensor::new(s.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injector::{encode_entities, encode_poses, fuse_entity_pose, stack_pose_embeddings, EMBED_DIM};
    use crate::pose::{Pose6DoF, PoseSequence, Vec3};
    use rand_distr::{Distribution, StandardNormal};

    fn latent(seed: u64) -> LatentVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..2 * 2 * 2 * EMBED_DIM)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::new(vec![2, 2, 2, EMBED_DIM], data).unwrap()
    }

    fn conditions(params: &InjectorParams, swap: bool) -> EmbeddingTensor {
        let mut prompts = vec![vec!["a".to_string(), "man".into()], vec!["a".into(), "dog".into()]];
        let mut seqs: Vec<PoseSequence> = (0..2)
            .map(|e| {
                let poses = (0..5)
                    .map(|i| Pose6DoF::from_yaw(10.0 * (i + e) as f64, Vec3::new(0.2 * i as f64, e as f64, 0.0)))
                    .collect();
                PoseSequence::new(20.0, poses).unwrap()
            })
            .collect();
        if swap {
            prompts.swap(0, 1);
            seqs.swap(0, 1);
        }
        let z_e = encode_entities(&prompts, EMBED_DIM).unwrap();
        let z_p: Vec<_> = seqs.iter().map(|s| encode_poses(s, params).unwrap()).collect();
        fuse_entity_pose(&z_e, &stack_pose_embeddings(&z_p).unwrap()).unwrap()
    }

    #[test]
    fn closed_gate_matches_no_injector() {
        let base = DitBlockWeights::random(EMBED_DIM, 16, 3);
        let mut p = InjectorParams::from_base(&base, 4);
        let c = conditions(&p, false);
        let x = latent(1);
        let frozen = toy_dit_block(&x, Some(&c), 500.0, &base, None, InjectorPlacement::NoInjector).unwrap();
        let fresh = toy_dit_block(&x, Some(&c), 500.0, &base, Some(&p), InjectorPlacement::After2d).unwrap();
        assert_eq!(frozen, fresh);
        p.lora.values_mut().for_each(|l| l.b.fill(0.3));
        let a = toy_dit_block(&x, Some(&c), 500.0, &base, Some(&p), InjectorPlacement::NoInjector).unwrap();
        let b = toy_dit_block(&x, Some(&c), 500.0, &base, Some(&p), InjectorPlacement::After2d).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, frozen);
    }

    #[test]
    fn zero_in_zero_out() {
        let base = DitBlockWeights::random(EMBED_DIM, 16, 3);
        let x = Tensor::zeros(vec![2, 2, 2, EMBED_DIM]);
        let y = toy_dit_block(&x, None, 10.0, &base, None, InjectorPlacement::NoInjector).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn placement_matters_with_open_gate() {
        let base = DitBlockWeights::random(EMBED_DIM, 16, 3);
        let mut p = InjectorParams::from_base(&base, 4);
        p.gate_gamma = 0.8;
        let c = conditions(&p, false);
        let x = latent(2);
        let a = toy_dit_block(&x, Some(&c), 250.0, &base, Some(&p), InjectorPlacement::After2d).unwrap();
        let b = toy_dit_block(&x, Some(&c), 250.0, &base, Some(&p), InjectorPlacement::After3d).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
        // swapping entities together with their trajectories changes nothing
        let swapped = conditions(&p, true);
        let s = toy_dit_block(&x, Some(&swapped), 250.0, &base, Some(&p), InjectorPlacement::After2d).unwrap();
        assert!(a.max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn lora_output_is_affine_in_alpha() {
        let base = DitBlockWeights::random(EMBED_DIM, 16, 3);
        let mut p = InjectorParams::from_base(&base, 4);
        p.lora.values_mut().for_each(|l| l.b.fill(0.2));
        let w = |alpha: f64| {
            let q = InjectorParams {
                lora_alpha: alpha,
                ..p.clone()
            };
            base.with_lora(&q).unwrap().ffn_w1
        };
        let (a, b, c) = (w(0.0), w(0.5), w(1.0));
        assert_eq!(a, base.ffn_w1);
        assert!(((&a + &c) * 0.5 - b).amax() < 1e-12);
        p.lora_alpha = 0.0;
        assert_eq!(base.with_lora(&p).unwrap(), base);
    }

    #[test]
    fn placement_names() {
        assert_eq!(
            "after_3d".parse::<InjectorPlacement>().unwrap(),
            InjectorPlacement::After3d
        );
        assert!("sideways".parse::<InjectorPlacement>().is_err());
    }
}
