//! The grounded object injector at toy scale.
//!
//! Entity descriptions and pose sequences are embedded, summed entity-wise
//! and appended as extra tokens to each latent frame. A gated single-head
//! attention layer writes them back into the video tokens:
//!
//! ```text
//! out = x + tanh(γ) · trunc_M( Attn([x; Z_Pe]) )
//! ```
//!
//! Matrices hold tokens in rows. A projection weight `W` maps a token row
//! `t` to `t·Wᵀ`.

mod checkpoint;
mod dit;
mod grad;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use dit::{timestep_embedding, toy_dit_block, DitBlockWeights, InjectorPlacement, LatentVideo, TIME_EMBED_DIM};
pub use grad::{
    checked_parameter_count, gate_gradient, grad_check, grad_check_f32, quadratic_grad_check, GradCheckReport,
    ToyBatch, FD_STEP, TOY_LORA_KEY,
};

use nalgebra::{DMatrix, DVector, RealField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use crate::dataset::MAX_PROMPT_TOKENS;
use crate::error::{Error, Result};
use crate::pose::PoseSequence;
use crate::tensor::{EmbeddingTensor, Tensor};

/// Token width.
pub const EMBED_DIM: usize = 8;
/// Padded prompt length.
pub const L_MAX: usize = MAX_PROMPT_TOKENS;
pub const N_MAX: usize = 3;
/// Temporal interval of the pose downsampler.
pub const DOWNSAMPLE: usize = 4;
pub const LORA_RANK: usize = 2;
/// Flattened pose width: 9 rotation entries then 3 translation entries.
pub const POSE_WIDTH: usize = 12;

/// Number of latent frames kept from `frames` input frames.
pub fn latent_frames(frames: usize, factor: usize) -> usize {
    1 + (frames - 1) / factor
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T: RealField + Copy = f64> {
    pub wq: DMatrix<T>,
    pub wk: DMatrix<T>,
    pub wv: DMatrix<T>,
    pub wo: DMatrix<T>,
}

impl<T: RealField + Copy> AttentionWeights<T> {
    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }
}

impl AttentionWeights<f64> {
    pub fn random(d: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: normal_matrix(d, d, std, rng),
            wk: normal_matrix(d, d, std, rng),
            wv: normal_matrix(d, d, std, rng),
            wo: normal_matrix(d, d, std, rng),
        }
    }

    pub fn cast_f32(&self) -> AttentionWeights<f32> {
        AttentionWeights {
            wq: self.wq.clone().cast(),
            wk: self.wk.clone().cast(),
            wv: self.wv.clone().cast(),
            wo: self.wo.clone().cast(),
        }
    }

    fn validate(&self, d: usize, what: &'static str) -> Result<()> {
        for (name, m) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if m.shape() != (d, d) {
                return Err(Error::shape(
                    what,
                    format!("{name} is {:?}, expected ({d}, {d})", m.shape()),
                ));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    location: format!("{what}.{name}"),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn normal_matrix(r: usize, c: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    DMatrix::from_fn(r, c, |_, _| dist.sample(rng))
}

/// Low-rank update `α·A·Bᵀ` for one `d×d` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// `W + α·A·Bᵀ`.
pub fn lora_merge<T: RealField + Copy>(w: &DMatrix<T>, a: &DMatrix<T>, b: &DMatrix<T>, alpha: T) -> Result<DMatrix<T>> {
    if a.nrows() != w.nrows() || b.nrows() != w.ncols() || a.ncols() != b.ncols() {
        return Err(Error::shape(
            "lora_merge",
            format!("W {:?}, A {:?}, B {:?}", w.shape(), a.shape(), b.shape()),
        ));
    }
    Ok(w + (a * b.transpose()) * alpha)
}

/// Trainable parameters of the injector and the LoRA adaptor.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectorParams {
    /// `D × 12` pose encoder weight.
    pub pose_weight: DMatrix<f64>,
    pub pose_bias: DVector<f64>,
    pub attn: AttentionWeights,
    /// The gate is `tanh(gate_gamma)`.
    pub gate_gamma: f64,
    /// Keyed by the base weight they wrap, e.g. `attn2d.wq`.
    pub lora: std::collections::BTreeMap<String, LoraPair>,
    pub lora_alpha: f64,
    pub downsample: usize,
}

impl InjectorParams {
    /// Fresh parameters for `base`: attention copied from the block's
    /// spatial layer, closed gate, LoRA `B = 0`, random pose encoder.
    pub fn from_base(base: &DitBlockWeights, seed: u64) -> Self {
        let d = base.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose_weight = normal_matrix(d, POSE_WIDTH, 0.1, &mut rng);
        let lora = base
            .lora_targets()
            .into_iter()
            .map(|(name, w)| {
                let pair = LoraPair {
                    a: normal_matrix(w.nrows(), LORA_RANK, 0.1, &mut rng),
                    b: DMatrix::zeros(w.ncols(), LORA_RANK),
                };
                (name, pair)
            })
            .collect();
        Self {
            pose_weight,
            pose_bias: DVector::zeros(d),
            attn: base.attn2d.clone(),
            gate_gamma: 0.0,
            lora,
            lora_alpha: 0.4,
            downsample: DOWNSAMPLE,
        }
    }

    pub fn dim(&self) -> usize {
        self.pose_weight.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.pose_weight.shape() != (d, POSE_WIDTH) || self.pose_bias.len() != d {
            return Err(Error::shape(
                "injector.pose_linear",
                format!("weight {:?}, bias {}", self.pose_weight.shape(), self.pose_bias.len()),
            ));
        }
        self.attn.validate(d, "injector.attn")?;
        if !self.gate_gamma.is_finite() {
            return Err(Error::NonFinite {
                location: "injector.gate_gamma".into(),
            });
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha >= 0.0) {
            return Err(Error::validation("lora_alpha", "must be finite and >= 0"));
        }
        if self.downsample == 0 {
            return Err(Error::validation("downsample", "must be >= 1"));
        }
        for (name, p) in &self.lora {
            if p.a.ncols() == 0 || p.a.ncols() != p.b.ncols() {
                return Err(Error::validation(
                    format!("lora.{name}"),
                    "rank must be >= 1 and shared by A and B",
                ));
            }
            if p.a.iter().chain(p.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    location: format!("lora.{name}"),
                });
            }
        }
        Ok(())
    }
}

fn token_embedding(token: &str, d: usize) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Stand-in for a frozen text encoder: each token maps to a fixed unit
/// vector derived from its hash. Rows past the prompt are zero.
pub fn encode_entities(prompts: &[Vec<String>], d: usize) -> Result<EmbeddingTensor> {
    if prompts.len() > N_MAX {
        return Err(Error::OutOfRange {
            what: "entity count",
            value: prompts.len() as f64,
            min: 0.0,
            max: N_MAX as f64,
        });
    }
    let mut out = Tensor::zeros(vec![prompts.len(), L_MAX, d]);
    for (n, p) in prompts.iter().enumerate() {
        if p.len() > L_MAX {
            return Err(Error::OutOfRange {
                what: "prompt tokens",
                value: p.len() as f64,
                min: 0.0,
                max: L_MAX as f64,
            });
        }
        for (l, tok) in p.iter().enumerate() {
            for (k, v) in token_embedding(tok, d).into_iter().enumerate() {
                out.set(&[n, l, k], v);
            }
        }
    }
    Ok(out)
}

/// Frame indices kept by the interval downsampler.
pub fn kept_frames(frames: usize, factor: usize) -> Vec<usize> {
    (0..frames).step_by(factor).collect()
}

/// Linear pose encoder followed by temporal interval sampling:
/// `(F̃, D)` with `F̃ = 1 + ⌊(F−1)/factor⌋`.
pub fn encode_poses(seq: &PoseSequence, params: &InjectorParams) -> Result<EmbeddingTensor> {
    let d = params.dim();
    let kept = kept_frames(seq.len(), params.downsample);
    let mut data = Vec::with_capacity(kept.len() * d);
    for &f in &kept {
        let row = DVector::from_row_slice(&seq.poses()[f].to_row());
        let z = &params.pose_weight * row + &params.pose_bias;
        data.extend(z.iter());
    }
    Tensor::new(vec![kept.len(), d], data)
}

/// Stacks per-entity pose embeddings `(F̃, D)` into `(F̃, N, D)`.
pub fn stack_pose_embeddings(per_entity: &[EmbeddingTensor]) -> Result<EmbeddingTensor> {
    let Some(first) = per_entity.first() else {
        return Err(Error::shape("stack_pose_embeddings", "no entities"));
    };
    let (f, d) = (first.shape()[0], first.shape()[1]);
    if per_entity.iter().any(|t| t.shape() != [f, d]) {
        return Err(Error::shape("stack_pose_embeddings", "entities disagree on (F̃, D)"));
    }
    let n = per_entity.len();
    let mut out = Tensor::zeros(vec![f, n, d]);
    for (e, t) in per_entity.iter().enumerate() {
        for fi in 0..f {
            for k in 0..d {
                out.set(&[fi, e, k], t.get(&[fi, k]));
            }
        }
    }
    Ok(out)
}

/// Entity-wise addition: `out[f,n,l,:] = Z_e[n,l,:] + Z_P[f,n,:]`.
pub fn fuse_entity_pose(z_e: &EmbeddingTensor, z_p: &EmbeddingTensor) -> Result<EmbeddingTensor> {
    let (es, ps) = (z_e.shape(), z_p.shape());
    if es.len() != 3 || ps.len() != 3 || es[0] != ps[1] || es[2] != ps[2] {
        return Err(Error::shape(
            "fuse_entity_pose",
            format!("Z_e {es:?} and Z_P {ps:?} need (N, L, D) and (F̃, N, D)"),
        ));
    }
    let (f, n, l, d) = (ps[0], es[0], es[1], es[2]);
    let mut data = Vec::with_capacity(f * n * l * d);
    for fi in 0..f {
        for ni in 0..n {
            let p = &z_p.slab(&[fi, ni]);
            for li in 0..l {
                let e = z_e.slab(&[ni, li]);
                data.extend(e.iter().zip(p.iter()).map(|(a, b)| a + b));
            }
        }
    }
    Tensor::new(vec![f, n, l, d], data)
}

/// Condition tokens of latent frame `f` as an `(N·L, D)` matrix.
pub fn frame_conditions(z_pe: &EmbeddingTensor, f: usize) -> DMatrix<f64> {
    let s = z_pe.shape();
    let (rows, d) = (s[1] * s[2], s[3]);
    DMatrix::from_row_slice(rows, d, z_pe.slab(&[f]))
}

pub(crate) fn to_f64<T: RealField + Copy>(v: T) -> f64 {
    nalgebra::try_convert(v).expect("float widens to f64")
}

fn softmax_rows<T: RealField + Copy>(s: &mut DMatrix<T>) {
    for mut row in s.row_iter_mut() {
        let max = row
            .iter()
            .copied()
            .fold(T::min_value().expect("float"), |a, b| a.max(b));
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row.apply(|v| *v /= sum);
    }
}

/// Intermediates of one attention call, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache<T: RealField + Copy> {
    /// Query source rows (the first `M` tokens).
    pub xq: DMatrix<T>,
    /// All key/value tokens.
    pub tokens: DMatrix<T>,
    pub k: DMatrix<T>,
    pub v: DMatrix<T>,
    pub q: DMatrix<T>,
    pub p: DMatrix<T>,
    pub o: DMatrix<T>,
}

/// Single-head attention where the rows of `queries` attend over
/// `[queries; extra]`. Returns `softmax(Q·Kᵀ/√D)·V·Woᵀ` for the query rows.
pub(crate) fn attention_forward<T: RealField + Copy>(
    queries: &DMatrix<T>,
    extra: Option<&DMatrix<T>>,
    w: &AttentionWeights<T>,
) -> Result<(DMatrix<T>, AttentionCache<T>)> {
    let d = w.dim();
    if queries.ncols() != d || extra.is_some_and(|e| e.ncols() != d) {
        return Err(Error::shape("attention", format!("tokens must have width {d}")));
    }
    let tokens = match extra {
        Some(e) if e.nrows() > 0 => {
            let mut t = DMatrix::zeros(queries.nrows() + e.nrows(), d);
            t.rows_mut(0, queries.nrows()).copy_from(queries);
            t.rows_mut(queries.nrows(), e.nrows()).copy_from(e);
            t
        }
        _ => queries.clone(),
    };
    let q = queries * w.wq.transpose();
    let k = &tokens * w.wk.transpose();
    let v = &tokens * w.wv.transpose();
    let scale = T::one() / nalgebra::convert::<f64, T>(d as f64).sqrt();
    let mut p = (&q * k.transpose()) * scale;
    softmax_rows(&mut p);
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            location: "attention softmax".into(),
        });
    }
    let o = &p * &v;
    let y = &o * w.wo.transpose();
    Ok((
        y,
        AttentionCache {
            xq: queries.clone(),
            tokens,
            k,
            v,
            q,
            p,
            o,
        },
    ))
}

/// Gated self-attention over `[x; conditions]`, truncated to the `M` video
/// rows: `x + tanh(γ)·Y[..M]`.
pub fn gated_self_attention<T: RealField + Copy>(
    x: &DMatrix<T>,
    conditions: &DMatrix<T>,
    attn: &AttentionWeights<T>,
    gate_gamma: T,
) -> Result<DMatrix<T>> {
    let beta = gate_gamma.tanh();
    let (y, _) = attention_forward(x, Some(conditions), attn)?;
    if beta == T::zero() {
        // a closed gate passes x through untouched, including the sign of zeros
        return Ok(x.clone());
    }
    let out = x + y * beta;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: "gated attention output".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{Pose6DoF, Vec3};
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn entity_encoding_contract() {
        let z = encode_entities(&[vec![]], EMBED_DIM).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let p: Vec<String> = "a man in red coat".split(' ').map(String::from).collect();
        let z = encode_entities(&[p.clone(), vec!["man".into()]], EMBED_DIM).unwrap();
        assert_eq!(z.shape(), [2, L_MAX, EMBED_DIM]);
        assert_eq!(z.slab(&[0, 1]), z.slab(&[1, 0]));
        for l in 5..L_MAX {
            assert!(z.slab(&[0, l]).iter().all(|&v| v == 0.0));
        }
        let norm: f64 = z.slab(&[0, 0]).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let long = vec!["w".to_string(); 21];
        assert!(matches!(encode_entities(&[long], EMBED_DIM), Err(Error::OutOfRange { value, .. }) if value == 21.0));
    }

    fn params_with(weight: DMatrix<f64>) -> InjectorParams {
        let base = DitBlockWeights::random(EMBED_DIM, 16, 1);
        InjectorParams {
            pose_weight: weight,
            ..InjectorParams::from_base(&base, 2)
        }
    }

    #[test]
    fn pose_encoding_contract() {
        let seq = PoseSequence::new(
            20.0,
            (0..9)
                .map(|i| Pose6DoF::from_translation(Vec3::new(i as f64, 0.0, 0.0)))
                .collect(),
        )
        .unwrap();
        let zero = params_with(DMatrix::zeros(EMBED_DIM, POSE_WIDTH));
        let z = encode_poses(&seq, &zero).unwrap();
        assert_eq!(z.shape(), [3, EMBED_DIM]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(kept_frames(9, 4), [0, 4, 8]);
        assert_eq!(latent_frames(9, 4), 3);
        assert_eq!(latent_frames(100, 4), 25);

        let mut eye = DMatrix::zeros(EMBED_DIM, POSE_WIDTH);
        for i in 0..EMBED_DIM {
            eye[(i, i)] = 1.0;
        }
        // D = 8 < 12, so only the first 8 entries of the row survive
        let one = PoseSequence::new(20.0, vec![Pose6DoF::identity()]).unwrap();
        let z = encode_poses(&one, &params_with(eye)).unwrap();
        assert_eq!(z.data(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);

        let mut wide = DMatrix::zeros(16, POSE_WIDTH);
        for i in 0..POSE_WIDTH {
            wide[(i, i)] = 1.0;
        }
        let p = InjectorParams {
            pose_weight: wide,
            pose_bias: DVector::zeros(16),
            ..params_with(DMatrix::zeros(EMBED_DIM, POSE_WIDTH))
        };
        let z = encode_poses(&one, &p).unwrap();
        assert_eq!(
            z.data(),
            [1., 0., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 0.]
        );
    }

    #[test]
    fn fusion_contract() {
        let mut z_e = Tensor::zeros(vec![2, 3, 4]);
        let mut z_p = Tensor::zeros(vec![2, 2, 4]);
        z_e.set(&[0, 0, 0], 2.0);
        z_p.set(&[0, 0, 0], 3.0);
        let out = fuse_entity_pose(&z_e, &z_p).unwrap();
        assert_eq!(out.shape(), [2, 2, 3, 4]);
        assert_eq!(out.get(&[0, 0, 0, 0]), 5.0);
        assert_eq!(out.get(&[0, 0, 1, 0]), 3.0);
        assert_eq!(out.get(&[1, 0, 0, 0]), 2.0);
        assert!(fuse_entity_pose(&z_e, &Tensor::zeros(vec![2, 3, 4])).is_err());
    }

    #[test]
    fn lora_examples() {
        let w = DMatrix::<f64>::identity(2, 2);
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let m = lora_merge(&w, &a, &b, 0.4).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.0, 1.0]));
        assert_eq!(lora_merge(&w, &a, &b, 0.0).unwrap(), w);
        assert_eq!(lora_merge(&w, &(a.clone() * 0.0), &(b.clone() * 0.0), 0.7).unwrap(), w);
        assert!(lora_merge(&w, &a, &DMatrix::zeros(3, 1), 1.0).is_err());
    }

    #[test]
    fn single_token_attention_by_hand() {
        let w = AttentionWeights {
            wq: DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.5]),
            wk: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            wv: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            wo: DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]),
        };
        let x = DMatrix::from_row_slice(1, 2, &[1.5, -2.0]);
        let none = DMatrix::zeros(0, 2);
        let g: f64 = 0.7;
        let out = gated_self_attention(&x, &none, &w, g).unwrap();
        // V x = (-2, 1.5), Wo that = (-4, 4.5)
        let b = g.tanh();
        assert!((out[(0, 0)] - (1.5 - 4.0 * b)).abs() < 1e-15);
        assert!((out[(0, 1)] - (-2.0 + 4.5 * b)).abs() < 1e-15);
    }

    #[test]
    fn closed_gate_is_identity_and_conditions_permute() {
        let mut r = rng(5);
        let w = AttentionWeights::random(EMBED_DIM, 0.5, &mut r);
        let x = normal_matrix(4, EMBED_DIM, 1.0, &mut r);
        let c = normal_matrix(6, EMBED_DIM, 1.0, &mut r);
        assert_eq!(gated_self_attention(&x, &c, &w, 0.0).unwrap(), x);
        let a = gated_self_attention(&x, &c, &w, 0.9).unwrap();
        let mut perm: Vec<usize> = (0..6).collect();
        perm.reverse();
        perm.swap(0, 3);
        let cp = DMatrix::from_fn(6, EMBED_DIM, |i, j| c[(perm[i], j)]);
        let b = gated_self_attention(&x, &cp, &w, 0.9).unwrap();
        assert!((a - b).amax() < 1e-12);
        let _: f64 = r.random();
    }
}
