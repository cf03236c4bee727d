//! Training objectives. Every probability entering a logarithm is clamped
//! to `[PROB_CLAMP, 1 - PROB_CLAMP]`.

use rand::Rng;
use voxgrad::{grad, Tensor, Var};

use crate::error::{Error, Result};
use crate::voxel::ClassWeights;

pub const PROB_CLAMP: f64 = 1e-7;

/// Keeps the gradient norm differentiable where the gradient vanishes.
const NORM_EPS: f64 = 1e-16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the reconstruction term in the encoder and generator losses.
    pub lambda: f64,
    /// Relative cost of false negatives against false positives.
    pub gamma: f64,
    /// Weight of the gradient penalty in the discriminator loss.
    pub gp_coeff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 10.0, gamma: 0.9, gp_coeff: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.gp_coeff > 0.0 && self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "need lambda > 0, gp_coeff > 0 and 0 < gamma < 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn clamp_prob(p: &Var) -> Result<Var> {
    Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?)
}

/// `mean(-log p)` over the batch.
pub fn neg_log(p: &Var) -> Result<Var> {
    Ok(clamp_prob(p)?.log()?.mean()?.neg()?)
}

/// `mean(-log(1 - p))` over the batch.
pub fn neg_log_complement(p: &Var) -> Result<Var> {
    Ok(clamp_prob(p)?.neg()?.add_scalar(1.0)?.log()?.mean()?.neg()?)
}

/// Class-weighted asymmetric cross entropy, summed over classes and
/// averaged over voxels and batch. `x` is one-hot with classes last.
pub fn reconstruction_loss(x: &Tensor, x_rec: &Var, weights: &ClassWeights, gamma: f64) -> Result<Var> {
    if x.shape() != x_rec.shape() {
        return Err(Error::Mismatch(format!(
            "reconstruction of shape {:?} against target {:?}",
            x_rec.shape(),
            x.shape()
        )));
    }
    let classes = weights.0.len();
    if x.shape().last() != Some(&classes) {
        return Err(Error::Mismatch(format!("target {:?} does not end in {classes} classes", x.shape())));
    }
    let w = |i: usize| weights.0[i % classes];
    let pos = Tensor::from_fn(x.shape(), |i| -gamma * w(i) * x.data()[i]);
    let neg = Tensor::from_fn(x.shape(), |i| -(1.0 - gamma) * w(i) * (1.0 - x.data()[i]));
    let p = clamp_prob(x_rec)?;
    let hit = p.log()?.mul_const(&pos)?;
    let miss = p.neg()?.add_scalar(1.0)?.log()?.mul_const(&neg)?;
    let voxels = x.numel() / classes;
    Ok(hit.add(&miss)?.sum()?.scale(1.0 / voxels as f64)?)
}

/// Penalty `mean((|grad_x D(x_hat)| - 1)^2)` with one interpolation weight
/// per batch item, `x_hat = u * real + (1 - u) * fake`. The result keeps its
/// graph so it can be differentiated with respect to the discriminator.
pub fn gradient_penalty_at<F>(d: F, real: &Tensor, fake: &Tensor, u: &[f64]) -> Result<Var>
where
    F: Fn(&Var) -> Result<Var>,
{
    if real.shape() != fake.shape() || real.rank() == 0 {
        return Err(Error::Mismatch(format!("penalty between {:?} and {:?}", real.shape(), fake.shape())));
    }
    let b = real.shape()[0];
    if u.len() != b {
        return Err(Error::Mismatch(format!("{} interpolation weights for batch {b}", u.len())));
    }
    let per_item = real.numel() / b;
    let mixed = Tensor::from_fn(real.shape(), |i| {
        let t = u[i / per_item];
        t * real.data()[i] + (1.0 - t) * fake.data()[i]
    });
    let x_hat = Var::leaf(mixed, true);
    let out = d(&x_hat)?;
    let g = grad(&out.sum()?, std::slice::from_ref(&x_hat), true)?.remove(0);
    if !g.value().all_finite() {
        return Err(Error::Tensor(voxgrad::TensorError::NonFinite { op: "gradient_penalty" }));
    }
    let sq_norm = g.mul(&g)?.reshape(&[b, per_item])?.sum_last()?;
    let deviation = sq_norm.add_scalar(NORM_EPS)?.sqrt()?.add_scalar(-1.0)?;
    Ok(deviation.mul(&deviation)?.mean()?)
}

/// [`gradient_penalty_at`] with `u ~ Uniform(0, 1)` per batch item.
pub fn gradient_penalty<F>(d: F, real: &Tensor, fake: &Tensor, rng: &mut impl Rng) -> Result<Var>
where
    F: Fn(&Var) -> Result<Var>,
{
    let b = real.shape().first().copied().unwrap_or(0);
    let u: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    gradient_penalty_at(d, real, fake, &u)
}

/// `-log D(x) - log(1 - D(x_rec)) - log(1 - D(x_gen)) + gp_coeff * gp`.
/// The penalty is added so that minimizing the loss enforces it.
pub fn discriminator_loss(d_x: &Var, d_xrec: &Var, d_xgen: &Var, gp: &Var, gp_coeff: f64) -> Result<Var> {
    let adversarial = neg_log(d_x)?.add(&neg_log_complement(d_xrec)?)?.add(&neg_log_complement(d_xgen)?)?;
    Ok(adversarial.add(&gp.scale(gp_coeff)?)?)
}

/// `-log D(x_rec) - log D(x_gen)`.
pub fn generator_loss(d_xrec: &Var, d_xgen: &Var) -> Result<Var> {
    Ok(neg_log(d_xrec)?.add(&neg_log(d_xgen)?)?)
}

/// `-log C(E(x)) + lambda * l_rec`; only the reconstruction term without
/// a code discriminator.
pub fn encoder_loss(c_zenc: Option<&Var>, l_rec: &Var, lambda: f64) -> Result<Var> {
    let rec = l_rec.scale(lambda)?;
    match c_zenc {
        Some(c) => Ok(neg_log(c)?.add(&rec)?),
        None => Ok(rec),
    }
}

/// `-log C(z_prior) - log(1 - C(z_enc))`.
pub fn code_discriminator_loss(c_zprior: &Var, c_zenc: &Var) -> Result<Var> {
    Ok(neg_log(c_zprior)?.add(&neg_log_complement(c_zenc)?)?)
}

/// `mean D(real) - mean D(fake)`, a monitoring quantity only.
pub fn wasserstein_estimate<F>(d: F, real: &Tensor, fake: &Tensor) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if real.shape() != fake.shape() {
        return Err(Error::Mismatch(format!("estimate between {:?} and {:?}", real.shape(), fake.shape())));
    }
    let mean = |t: Tensor| t.sum() / t.numel() as f64;
    Ok(mean(d(real)?) - mean(d(fake)?))
}
