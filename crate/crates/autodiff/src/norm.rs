use crate::error::{Result, TensorError};
use crate::tensor::Tensor;
use crate::var::Var;

/// Batch statistics for one channel-last input: mean and biased variance.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

pub enum BatchNormMode<'a> {
    /// Standardize with statistics of the current batch.
    Train,
    /// Standardize with stored running statistics.
    Eval { mean: &'a Tensor, var: &'a Tensor },
}

/// Per-channel batch normalization over the batch and spatial axes.
///
/// Built from differentiable primitives, so it supports higher-order
/// gradients. In training mode the batch statistics are returned for the
/// caller to fold into running averages.
pub fn batch_norm(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    eps: f64,
    mode: BatchNormMode<'_>,
) -> Result<(Var, Option<BatchStats>)> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| TensorError::Shape { op: "batch_norm", msg: "rank-0 input".into() })?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::Shape {
            op: "batch_norm",
            msg: format!("affine parameters must be [{c}], got {:?} / {:?}", gamma.shape(), beta.shape()),
        });
    }
    let n = x.numel() / c.max(1);
    if n == 0 {
        return Err(TensorError::Usage("batch_norm on an empty batch".into()));
    }
    let shape = x.shape().to_vec();
    let (centered, var, stats) = match mode {
        BatchNormMode::Train => {
            let mean = x.sum_leading()?.scale(1.0 / n as f64)?;
            let centered = x.sub(&mean.expand_leading(&shape)?)?;
            let var = centered.mul(&centered)?.sum_leading()?.scale(1.0 / n as f64)?;
            let stats = BatchStats { mean: mean.value().clone(), var: var.value().clone() };
            (centered, var, Some(stats))
        }
        BatchNormMode::Eval { mean, var } => {
            let mean = Var::constant(mean.clone());
            let centered = x.sub(&mean.expand_leading(&shape)?)?;
            (centered, Var::constant(var.clone()), None)
        }
    };
    let inv_std = var.add_scalar(eps)?.powf(-0.5)?;
    let y = centered
        .mul(&inv_std.mul(gamma)?.expand_leading(&shape)?)?
        .add(&beta.expand_leading(&shape)?)?;
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = Var::constant(Tensor::from_fn(&[2, 3, 3, 3, 4], |i| ((i * 37) % 11) as f64 * 0.3 - 1.0));
        let g = Var::constant(Tensor::ones(&[4]));
        let b = Var::constant(Tensor::zeros(&[4]));
        let (y, stats) = batch_norm(&x, &g, &b, 1e-5, BatchNormMode::Train).unwrap();
        assert!(stats.is_some());
        let n = (y.numel() / 4) as f64;
        for ch in 0..4 {
            let vals: Vec<f64> = y.value().data().iter().skip(ch).step_by(4).copied().collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Var::constant(Tensor::full(&[2, 2, 2, 2, 1], 3.5));
        let g = Var::constant(Tensor::ones(&[1]));
        let b = Var::constant(Tensor::zeros(&[1]));
        let (y, _) = batch_norm(&x, &g, &b, 1e-5, BatchNormMode::Train).unwrap();
        assert!(y.value().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Var::constant(Tensor::full(&[1, 1, 1, 1, 2], 3.0));
        let g = Var::constant(Tensor::ones(&[2]));
        let b = Var::constant(Tensor::zeros(&[2]));
        let mean = Tensor::new(&[2], vec![1.0, 3.0]).unwrap();
        let var = Tensor::new(&[2], vec![4.0, 1.0]).unwrap();
        let (y, stats) =
            batch_norm(&x, &g, &b, 0.0, BatchNormMode::Eval { mean: &mean, var: &var }).unwrap();
        assert!(stats.is_none());
        assert_eq!(y.value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let x = Var::constant(Tensor::zeros(&[0, 2, 2, 2, 3]));
        let g = Var::constant(Tensor::ones(&[3]));
        let b = Var::constant(Tensor::zeros(&[3]));
        assert!(batch_norm(&x, &g, &b, 1e-5, BatchNormMode::Train).is_err());
    }
}
