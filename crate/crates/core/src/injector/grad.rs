//! Hand-written gradients of a toy injector loss, checked against central
//! finite differences.
//!
//! The toy model per latent frame `f`:
//!
//! ```text
//! x_f   = x_in_f · (W₀ + α·A·Bᵀ)ᵀ          LoRA-wrapped frozen projection
//! z_n   = W_p · pose_n(f) + b_p             pose encoder
//! c_f   = [Z_e[n,l] + z_n]_(n,l)            entity-wise fusion
//! out_f = x_f + tanh(γ)·Attn([x_f; c_f])[..M]
//! loss  = Σ_f ‖out_f − ε_f‖²
//! ```

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, RealField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    attention_forward, encode_entities, kept_frames, latent_frames, normal_matrix, to_f64, AttentionCache,
    AttentionWeights, InjectorParams, LoraPair, POSE_WIDTH,
};
use crate::error::{Error, Result};
use crate::pose::{Pose6DoF, PoseSequence, Vec3};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
// Relative errors divide by max(|analytic|, |numeric|, REL_FLOOR) so that
// entries whose true gradient is ~0 are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;
/// LoRA pair used for the toy projection.
pub const TOY_LORA_KEY: &str = "attn2d.wv";

/// Fixed inputs for the toy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBatch {
    /// Per latent frame, `M × D` tokens before the projection.
    pub x_in: Vec<DMatrix<f64>>,
    /// Per latent frame, `M × D` regression targets.
    pub eps: Vec<DMatrix<f64>>,
    pub prompts: Vec<Vec<String>>,
    /// One pose sequence per entity.
    pub trajectories: Vec<PoseSequence>,
    /// Frozen `D × D` projection wrapped by LoRA.
    pub proj: DMatrix<f64>,
}

impl ToyBatch {
    /// A random batch with `latent` frames of `m` tokens and `n` entities,
    /// plus injector parameters with an open gate and non-zero LoRA.
    pub fn random(latent: usize, m: usize, n: usize, d: usize, seed: u64) -> (ToyBatch, InjectorParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = super::DitBlockWeights::random(d, 2 * d, seed ^ 0x5eed);
        let mut params = InjectorParams::from_base(&base, seed.wrapping_add(1));
        params.gate_gamma = 0.5;
        params.pose_bias = normal_matrix(d, 1, 0.1, &mut rng).column(0).into_owned();
        for pair in params.lora.values_mut() {
            pair.b = normal_matrix(pair.b.nrows(), pair.b.ncols(), 0.1, &mut rng);
        }
        let frames = 1 + (latent - 1) * params.downsample;
        let trajectories = (0..n)
            .map(|e| {
                let poses = (0..frames)
                    .map(|i| {
                        let s = i as f64 / frames as f64;
                        Pose6DoF::from_yaw(40.0 * s + 25.0 * e as f64, Vec3::new(s, 0.5 * e as f64, 0.1 * s))
                    })
                    .collect();
                PoseSequence::new(20.0, poses).expect("valid poses")
            })
            .collect();
        let words = ["a", "man", "in", "red", "dog", "runs", "grey", "horse"];
        let prompts = (0..n)
            .map(|e| {
                (0..3 + e)
                    .map(|k| words[(k * 3 + e) % words.len()].to_string())
                    .collect()
            })
            .collect();
        let batch = ToyBatch {
            x_in: (0..latent).map(|_| normal_matrix(m, d, 1.0, &mut rng)).collect(),
            eps: (0..latent).map(|_| normal_matrix(m, d, 1.0, &mut rng)).collect(),
            prompts,
            trajectories,
            proj: normal_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut rng),
        };
        (batch, params)
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest elementwise relative error.
    pub max_rel_error: f64,
    /// Largest elementwise relative error per parameter group.
    pub per_group: BTreeMap<String, f64>,
    /// Largest per-group `‖a − n‖ / max(‖a‖, ‖n‖)`.
    pub max_group_rel_error: f64,
    pub params_checked: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
struct Flat<T: RealField + Copy> {
    pose_w: DMatrix<T>,
    pose_b: DVector<T>,
    attn: AttentionWeights<T>,
    gamma: T,
    lora_a: DMatrix<T>,
    lora_b: DMatrix<T>,
}

impl Flat<f64> {
    fn from_params(p: &InjectorParams) -> Result<Self> {
        let LoraPair { a, b } = p
            .lora
            .get(TOY_LORA_KEY)
            .ok_or_else(|| Error::validation("lora", format!("missing {TOY_LORA_KEY}")))?;
        Ok(Self {
            pose_w: p.pose_weight.clone(),
            pose_b: p.pose_bias.clone(),
            attn: p.attn.clone(),
            gamma: p.gate_gamma,
            lora_a: a.clone(),
            lora_b: b.clone(),
        })
    }

    fn cast_f32(&self) -> Flat<f32> {
        Flat {
            pose_w: self.pose_w.clone().cast(),
            pose_b: self.pose_b.clone().cast(),
            attn: self.attn.cast_f32(),
            gamma: self.gamma as f32,
            lora_a: self.lora_a.clone().cast(),
            lora_b: self.lora_b.clone().cast(),
        }
    }
}

impl<T: RealField + Copy> Flat<T> {
    fn zeros_like(&self) -> Self {
        let z = |m: &DMatrix<T>| DMatrix::zeros(m.nrows(), m.ncols());
        Flat {
            pose_w: z(&self.pose_w),
            pose_b: DVector::zeros(self.pose_b.len()),
            attn: AttentionWeights {
                wq: z(&self.attn.wq),
                wk: z(&self.attn.wk),
                wv: z(&self.attn.wv),
                wo: z(&self.attn.wo),
            },
            gamma: T::zero(),
            lora_a: z(&self.lora_a),
            lora_b: z(&self.lora_b),
        }
    }

    fn groups(&self) -> Vec<(&'static str, &[T])> {
        vec![
            ("pose_linear.weight", self.pose_w.as_slice()),
            ("pose_linear.bias", self.pose_b.as_slice()),
            ("attn.wq", self.attn.wq.as_slice()),
            ("attn.wk", self.attn.wk.as_slice()),
            ("attn.wv", self.attn.wv.as_slice()),
            ("attn.wo", self.attn.wo.as_slice()),
            ("gate_gamma", std::slice::from_ref(&self.gamma)),
            ("lora.a", self.lora_a.as_slice()),
            ("lora.b", self.lora_b.as_slice()),
        ]
    }

    fn groups_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("pose_linear.weight", self.pose_w.as_mut_slice()),
            ("pose_linear.bias", self.pose_b.as_mut_slice()),
            ("attn.wq", self.attn.wq.as_mut_slice()),
            ("attn.wk", self.attn.wk.as_mut_slice()),
            ("attn.wv", self.attn.wv.as_mut_slice()),
            ("attn.wo", self.attn.wo.as_mut_slice()),
            ("gate_gamma", std::slice::from_mut(&mut self.gamma)),
            ("lora.a", self.lora_a.as_mut_slice()),
            ("lora.b", self.lora_b.as_mut_slice()),
        ]
    }
}

/// The batch in the working precision, with poses already flattened.
struct Prepared<T: RealField + Copy> {
    x_in: Vec<DMatrix<T>>,
    eps: Vec<DMatrix<T>>,
    /// `(N·L) × D` entity embeddings.
    z_e: DMatrix<T>,
    /// `[latent frame][entity]` flattened poses.
    poses: Vec<Vec<DVector<T>>>,
    proj: DMatrix<T>,
    alpha: T,
    l: usize,
}

fn prepare(batch: &ToyBatch, params: &InjectorParams) -> Result<Prepared<f64>> {
    let d = params.dim();
    let latent = batch.x_in.len();
    if latent == 0 || batch.eps.len() != latent {
        return Err(Error::shape(
            "grad_check",
            "x_in and eps need the same non-zero frame count",
        ));
    }
    let m = batch.x_in[0].nrows();
    if batch.x_in.iter().chain(&batch.eps).any(|x| x.shape() != (m, d)) {
        return Err(Error::shape("grad_check", format!("every frame must be ({m}, {d})")));
    }
    if batch.proj.shape() != (d, d) || batch.trajectories.len() != batch.prompts.len() {
        return Err(Error::shape(
            "grad_check",
            "projection must be D×D and trajectories pair with prompts",
        ));
    }
    let z = encode_entities(&batch.prompts, d)?;
    let rows = batch.prompts.len() * z.shape().get(1).copied().unwrap_or(0);
    let z_e = DMatrix::from_row_slice(rows, d, z.data());
    let mut poses = vec![Vec::new(); latent];
    for seq in &batch.trajectories {
        if latent_frames(seq.len(), params.downsample) != latent {
            return Err(Error::LengthMismatch {
                expected: latent,
                found: latent_frames(seq.len(), params.downsample),
            });
        }
        for (f, k) in kept_frames(seq.len(), params.downsample).into_iter().enumerate() {
            poses[f].push(DVector::from_row_slice(&seq.poses()[k].to_row()));
        }
    }
    Ok(Prepared {
        x_in: batch.x_in.clone(),
        eps: batch.eps.clone(),
        z_e,
        poses,
        proj: batch.proj.clone(),
        alpha: params.lora_alpha,
        l: z.shape()[1],
    })
}

impl Prepared<f64> {
    fn cast_f32(&self) -> Prepared<f32> {
        Prepared {
            x_in: self.x_in.iter().map(|m| m.clone().cast()).collect(),
            eps: self.eps.iter().map(|m| m.clone().cast()).collect(),
            z_e: self.z_e.clone().cast(),
            poses: self
                .poses
                .iter()
                .map(|f| f.iter().map(|v| v.clone().cast()).collect())
                .collect(),
            proj: self.proj.clone().cast(),
            alpha: self.alpha as f32,
            l: self.l,
        }
    }
}

struct AttnGrads<T: RealField + Copy> {
    dxq: DMatrix<T>,
    dtokens: DMatrix<T>,
    w: AttentionWeights<T>,
}

fn attention_backward<T: RealField + Copy>(
    c: &AttentionCache<T>,
    dy: &DMatrix<T>,
    w: &AttentionWeights<T>,
) -> AttnGrads<T> {
    let scale = T::one() / nalgebra::convert::<f64, T>(w.dim() as f64).sqrt();
    let dwo = dy.transpose() * &c.o;
    let d_o = dy * &w.wo;
    let dp = &d_o * c.v.transpose();
    let dv = c.p.transpose() * &d_o;
    let mut ds = dp.component_mul(&c.p);
    for (i, mut row) in ds.row_iter_mut().enumerate() {
        let dot = row.sum();
        for (j, v) in row.iter_mut().enumerate() {
            *v = c.p[(i, j)] * (dp[(i, j)] - dot);
        }
    }
    let dq = (&ds * &c.k) * scale;
    let dk = (ds.transpose() * &c.q) * scale;
    AttnGrads {
        dxq: &dq * &w.wq,
        dtokens: &dk * &w.wk + &dv * &w.wv,
        w: AttentionWeights {
            wq: dq.transpose() * &c.xq,
            wk: dk.transpose() * &c.tokens,
            wv: dv.transpose() * &c.tokens,
            wo: dwo,
        },
    }
}

fn loss_and_grad<T: RealField + Copy>(p: &Flat<T>, b: &Prepared<T>, want_grad: bool) -> Result<(T, Option<Flat<T>>)> {
    let weff = &b.proj + (&p.lora_a * p.lora_b.transpose()) * b.alpha;
    let beta = p.gamma.tanh();
    let two = nalgebra::convert::<f64, T>(2.0);
    let mut loss = T::zero();
    let mut g = want_grad.then(|| p.zeros_like());
    let mut dweff = DMatrix::<T>::zeros(weff.nrows(), weff.ncols());
    let mut dbeta = T::zero();
    for (f, (x_in, eps)) in b.x_in.iter().zip(&b.eps).enumerate() {
        let m = x_in.nrows();
        let xf = x_in * weff.transpose();
        let zp: Vec<DVector<T>> = b.poses[f].iter().map(|row| &p.pose_w * row + &p.pose_b).collect();
        let mut cond = b.z_e.clone();
        for (r, mut row) in cond.row_iter_mut().enumerate() {
            row += zp[r / b.l].transpose();
        }
        let (y, cache) = attention_forward(&xf, Some(&cond), &p.attn)?;
        let out = &xf + &y * beta;
        let resid = &out - eps;
        loss += resid.norm_squared();
        let Some(g) = g.as_mut() else { continue };

        let dout = resid * two;
        dbeta += dout.component_mul(&y).sum();
        let ag = attention_backward(&cache, &(&dout * beta), &p.attn);
        g.attn.wq += &ag.w.wq;
        g.attn.wk += &ag.w.wk;
        g.attn.wv += &ag.w.wv;
        g.attn.wo += &ag.w.wo;
        let dxf = dout + ag.dxq + ag.dtokens.rows(0, m);
        dweff += dxf.transpose() * x_in;
        let dcond = ag.dtokens.rows(m, cond.nrows());
        for (n, row) in b.poses[f].iter().enumerate() {
            let dz: DVector<T> = dcond.rows(n * b.l, b.l).row_sum().transpose();
            g.pose_w += &dz * row.transpose();
            g.pose_b += dz;
        }
    }
    if let Some(g) = g.as_mut() {
        g.gamma = dbeta * (T::one() - beta * beta);
        g.lora_a = (&dweff * &p.lora_b) * b.alpha;
        g.lora_b = (dweff.transpose() * &p.lora_a) * b.alpha;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            location: "toy loss".into(),
        });
    }
    Ok((loss, g))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Central differences of the f64 loss for every parameter.
fn numeric_grad(p: &Flat<f64>, b: &Prepared<f64>) -> Result<Flat<f64>> {
    let mut out = p.zeros_like();
    let mut probe = p.clone();
    let sizes: Vec<usize> = p.groups().iter().map(|(_, s)| s.len()).collect();
    for (gi, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.groups()[gi].1[i];
            probe.groups_mut()[gi].1[i] = orig + FD_STEP;
            let (lp, _) = loss_and_grad(&probe, b, false)?;
            probe.groups_mut()[gi].1[i] = orig - FD_STEP;
            let (lm, _) = loss_and_grad(&probe, b, false)?;
            probe.groups_mut()[gi].1[i] = orig;
            out.groups_mut()[gi].1[i] = (lp - lm) / (2.0 * FD_STEP);
        }
    }
    Ok(out)
}

fn compare<T: RealField + Copy>(analytic: &Flat<T>, numeric: &Flat<f64>, loss: f64) -> GradCheckReport {
    let mut per_group = BTreeMap::new();
    let mut max_rel_error: f64 = 0.0;
    let mut max_group_rel_error: f64 = 0.0;
    let mut params_checked = 0;
    for ((name, a), (_, n)) in analytic.groups().into_iter().zip(numeric.groups()) {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (&a, &n) in a.iter().zip(n) {
            let a = to_f64(a);
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
        let scale = f64::max(na, nn).sqrt();
        if scale > 0.0 {
            max_group_rel_error = max_group_rel_error.max(diff.sqrt() / scale);
        }
        let worst = a
            .iter()
            .zip(n)
            .map(|(&a, &n)| rel_err(to_f64(a), n))
            .fold(0.0, f64::max);
        params_checked += a.len();
        max_rel_error = max_rel_error.max(worst);
        per_group.insert(name.to_string(), worst);
    }
    GradCheckReport {
        max_rel_error,
        per_group,
        max_group_rel_error,
        params_checked,
        loss,
    }
}

/// Analytic gradients of the toy loss against central finite differences,
/// both in double precision.
pub fn grad_check(batch: &ToyBatch, params: &InjectorParams) -> Result<GradCheckReport> {
    params.validate()?;
    let b = prepare(batch, params)?;
    let p = Flat::from_params(params)?;
    let (loss, analytic) = loss_and_grad(&p, &b, true)?;
    let numeric = numeric_grad(&p, &b)?;
    Ok(compare(&analytic.expect("requested"), &numeric, loss))
}

/// Same check with the forward and backward pass run in single precision;
/// the reference differences stay in double precision.
pub fn grad_check_f32(batch: &ToyBatch, params: &InjectorParams) -> Result<GradCheckReport> {
    params.validate()?;
    let b = prepare(batch, params)?;
    let p = Flat::from_params(params)?;
    let (loss, analytic) = loss_and_grad(&p.cast_f32(), &b.cast_f32(), true)?;
    let numeric = numeric_grad(&p, &b)?;
    Ok(compare(&analytic.expect("requested"), &numeric, loss as f64))
}

/// Analytic and finite-difference derivative of the loss along `gate_gamma`.
pub fn gate_gradient(batch: &ToyBatch, params: &InjectorParams) -> Result<(f64, f64)> {
    let b = prepare(batch, params)?;
    let mut p = Flat::from_params(params)?;
    let (_, g) = loss_and_grad(&p, &b, true)?;
    let g0 = p.gamma;
    p.gamma = g0 + FD_STEP;
    let (lp, _) = loss_and_grad(&p, &b, false)?;
    p.gamma = g0 - FD_STEP;
    let (lm, _) = loss_and_grad(&p, &b, false)?;
    Ok((g.expect("requested").gamma, (lp - lm) / (2.0 * FD_STEP)))
}

/// Finite-difference check of `‖W‖²/2`, whose gradient is `W`. Returns the
/// largest relative error.
pub fn quadratic_grad_check(w: &DMatrix<f64>) -> f64 {
    let loss = |m: &DMatrix<f64>| 0.5 * m.norm_squared();
    let mut probe = w.clone();
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let lp = loss(&probe);
        probe[i] = orig - FD_STEP;
        let lm = loss(&probe);
        probe[i] = orig;
        worst = worst.max(rel_err(w[i], (lp - lm) / (2.0 * FD_STEP)));
    }
    worst
}

/// Number of scalars the check perturbs.
pub fn checked_parameter_count(params: &InjectorParams) -> usize {
    let d = params.dim();
    let r = params.lora.get(TOY_LORA_KEY).map_or(0, |p| p.a.ncols());
    d * POSE_WIDTH + d + 4 * d * d + 1 + 2 * d * r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injector::EMBED_DIM;

    #[test]
    fn quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(quadratic_grad_check(&normal_matrix(4, 3, 1.0, &mut rng)) < 1e-9);
    }

    #[test]
    fn toy_batch_double_precision() {
        let (batch, params) = ToyBatch::random(2, 4, 2, EMBED_DIM, 11);
        let r = grad_check(&batch, &params).unwrap();
        assert_eq!(r.params_checked, checked_parameter_count(&params));
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert_eq!(r.per_group.len(), 9);
    }

    #[test]
    fn toy_batch_single_precision() {
        let (batch, params) = ToyBatch::random(2, 4, 2, EMBED_DIM, 12);
        let r = grad_check_f32(&batch, &params).unwrap();
        assert!(r.max_group_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn gate_gradient_at_zero() {
        let (batch, mut params) = ToyBatch::random(2, 4, 2, EMBED_DIM, 13);
        params.gate_gamma = 0.0;
        let (a, n) = gate_gradient(&batch, &params).unwrap();
        assert!(a.abs() > 1e-3);
        assert!((a - n).abs() < 1e-6, "{a} vs {n}");
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let (mut batch, params) = ToyBatch::random(2, 4, 2, EMBED_DIM, 14);
        batch.eps.pop();
        assert!(grad_check(&batch, &params).is_err());
    }
}
