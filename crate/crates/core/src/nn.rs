//! Layer mechanisms shared by every network: equalized learning-rate
//! convolutions, per-voxel feature normalization and residual blocks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use voxgrad::{batch_norm, BatchNormMode, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{Binding, NormMode, ParamSet};

pub const DEFAULT_PIXEL_EPS: f64 = 1e-8;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Runtime weight divisor `c = (sqrt(2 / fan_in))^-1 = sqrt(fan_in / 2)`.
pub fn equalized_scale(fan_in: usize) -> Result<f64> {
    if fan_in == 0 {
        return Err(Error::Usage("equalized scaling needs fan_in >= 1".into()));
    }
    Ok((fan_in as f64 / 2.0).sqrt())
}

/// Per-voxel feature normalization over the channel axis:
/// `b = a / sqrt(mean_j(a_j^2) + eps)`.
pub fn pixelwise_norm(a: &Var, eps: f64) -> Result<Var> {
    if eps <= 0.0 {
        return Err(Error::Usage(format!("pixelwise_norm eps must be positive, got {eps}")));
    }
    let n = *a.shape().last().ok_or_else(|| Error::Usage("pixelwise_norm on a rank-0 tensor".into()))?;
    let mean_sq = a.mul(a)?.sum_last()?.scale(1.0 / n as f64)?;
    let inv = mean_sq.add_scalar(eps)?.powf(-0.5)?;
    Ok(a.mul(&inv.expand_last(n)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Transposed convolution multiplying extents by `factor`.
    Upsample,
    /// Strided convolution dividing extents by `factor`.
    Downsample,
    /// Stride-1 convolution preserving extents.
    Same,
    /// Fully connected on `[b, in]`.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    PixelNorm,
    BatchNorm,
    None,
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixelnorm" => Ok(NormKind::PixelNorm),
            "batchnorm" => Ok(NormKind::BatchNorm),
            "none" => Ok(NormKind::None),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::PixelNorm => "pixelnorm",
            NormKind::BatchNorm => "batchnorm",
            NormKind::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Softmax,
    Sigmoid,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub factor: [usize; 3],
    pub norm: NormKind,
    pub activation: Activation,
    /// Epsilon of the normalization.
    pub eps: f64,
}

impl LayerSpec {
    /// Convolution whose kernel is `factor + 2` per axis, padded by one.
    pub fn resampling(kind: LayerKind, in_channels: usize, out_channels: usize, factor: [usize; 3]) -> Self {
        LayerSpec {
            kind,
            in_channels,
            out_channels,
            kernel: factor.map(|f| f + 2),
            factor,
            norm: NormKind::None,
            activation: Activation::None,
            eps: DEFAULT_PIXEL_EPS,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec { kernel: [1; 3], ..Self::resampling(LayerKind::Same, in_channels, out_channels, [1; 3]) }
    }

    pub fn dense(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec { kind: LayerKind::Dense, kernel: [1; 3], ..Self::pointwise(in_channels, out_channels) }
    }

    pub fn with_norm(mut self, norm: NormKind, eps: f64) -> Self {
        self.norm = norm;
        self.eps = eps;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("layer eps must be positive, got {}", self.eps)));
        }
        if self.factor.iter().any(|f| !(1..=3).contains(f)) {
            return Err(Error::Config(format!("factors must be 1, 2 or 3, got {:?}", self.factor)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("layer channel counts must be positive".into()));
        }
        if self.kind == LayerKind::Same && self.factor != [1; 3] {
            return Err(Error::Config("stride-1 layers must have factor 1".into()));
        }
        for a in 0..3 {
            if self.kernel[a] < self.factor[a] || !(self.kernel[a] - self.factor[a]).is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "kernel {:?} cannot resample by {:?} exactly",
                    self.kernel, self.factor
                )));
            }
        }
        Ok(())
    }

    pub fn padding(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| (self.kernel[a] - self.factor[a]) / 2)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let [kd, kh, kw] = self.kernel;
        match self.kind {
            LayerKind::Dense => vec![self.in_channels, self.out_channels],
            // Laid out as the convolution it transposes.
            LayerKind::Upsample => vec![kd, kh, kw, self.out_channels, self.in_channels],
            LayerKind::Downsample | LayerKind::Same => vec![kd, kh, kw, self.in_channels, self.out_channels],
        }
    }

    /// Number of inputs feeding one output unit.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_channels,
            _ => self.kernel.iter().product::<usize>() * self.in_channels,
        }
    }

    /// Output shape for `input` without evaluating anything.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::Mismatch(format!("layer expecting {} channels cannot take {input:?}", self.in_channels));
        match self.kind {
            LayerKind::Dense => {
                if input.len() != 2 || input[1] != self.in_channels {
                    return Err(bad());
                }
                Ok(vec![input[0], self.out_channels])
            }
            _ => {
                if input.len() != 5 || input[4] != self.in_channels {
                    return Err(bad());
                }
                let mut out = input.to_vec();
                for a in 0..3 {
                    out[a + 1] = match self.kind {
                        LayerKind::Upsample => input[a + 1] * self.factor[a],
                        LayerKind::Downsample => {
                            if !input[a + 1].is_multiple_of(self.factor[a]) {
                                return Err(Error::Mismatch(format!(
                                    "extent {input:?} is not divisible by {:?}",
                                    self.factor
                                )));
                            }
                            input[a + 1] / self.factor[a]
                        }
                        _ => input[a + 1],
                    };
                }
                out[4] = self.out_channels;
                Ok(out)
            }
        }
    }
}

/// Raw (unit-normal) weight, bias and fan-in of one equalized layer.
pub struct EqualizedConvParams {
    pub raw_weight: Var,
    pub bias: Var,
    pub fan_in: usize,
}

impl EqualizedConvParams {
    pub fn from_binding(bind: &Binding, name: &str, spec: &LayerSpec) -> Result<Self> {
        Ok(EqualizedConvParams {
            raw_weight: bind.var(&format!("{name}.weight"))?.clone(),
            bias: bind.var(&format!("{name}.bias"))?.clone(),
            fan_in: spec.fan_in(),
        })
    }

    pub fn scale(&self) -> Result<f64> {
        equalized_scale(self.fan_in)
    }
}

/// Convolution (or dense product) with the runtime weight `raw / c`, plus bias.
pub fn equalized_forward(params: &EqualizedConvParams, x: &Var, spec: &LayerSpec) -> Result<Var> {
    if params.raw_weight.shape() != spec.weight_shape().as_slice() {
        return Err(Error::Mismatch(format!(
            "weight {:?} does not match layer {:?}",
            params.raw_weight.shape(),
            spec.weight_shape()
        )));
    }
    spec.output_shape(x.shape())?;
    let weight = params.raw_weight.scale(1.0 / params.scale()?)?;
    let y = match spec.kind {
        LayerKind::Dense => x.matmul(&weight)?,
        LayerKind::Upsample => x.conv3d_transpose(&weight, spec.factor, spec.padding())?,
        LayerKind::Downsample | LayerKind::Same => x.conv3d(&weight, spec.factor, spec.padding())?,
    };
    Ok(y.add_channel_bias(&params.bias)?)
}

/// Equalized layer followed by its normalization and activation.
pub fn layer_forward(spec: &LayerSpec, name: &str, bind: &Binding, x: &Var) -> Result<Var> {
    let params = EqualizedConvParams::from_binding(bind, name, spec)?;
    let mut y = equalized_forward(&params, x, spec)?;
    y = match spec.norm {
        NormKind::None => y,
        NormKind::PixelNorm => pixelwise_norm(&y, spec.eps)?,
        NormKind::BatchNorm => {
            let gamma = bind.var(&format!("{name}.gamma"))?;
            let beta = bind.var(&format!("{name}.beta"))?;
            match bind.mode() {
                NormMode::Train => {
                    let (out, stats) = batch_norm(&y, gamma, beta, spec.eps, BatchNormMode::Train)?;
                    if let Some(stats) = stats {
                        bind.record_stats(name, stats);
                    }
                    out
                }
                NormMode::Eval => {
                    let mean = bind.var(&format!("{name}.running_mean"))?.value();
                    let var = bind.var(&format!("{name}.running_var"))?.value();
                    batch_norm(&y, gamma, beta, spec.eps, BatchNormMode::Eval { mean, var })?.0
                }
            }
        }
    };
    Ok(match spec.activation {
        Activation::None => y,
        Activation::LeakyRelu(slope) => y.leaky_relu(slope)?,
        Activation::Softmax => y.softmax_channels()?,
        Activation::Sigmoid => y.sigmoid()?,
    })
}

/// `x + second(first(x))`, with both convolutions preserving shape.
pub fn resnet_block(x: &Var, name: &str, first: &LayerSpec, second: &LayerSpec, bind: &Binding) -> Result<Var> {
    let channels = first.in_channels;
    if x.shape().last() != Some(&channels) || second.out_channels != channels {
        return Err(Error::Mismatch(format!(
            "residual block {name} carries {channels} channels, input is {:?}",
            x.shape()
        )));
    }
    let h = layer_forward(first, &format!("{name}.a"), bind, x)?;
    let h = layer_forward(second, &format!("{name}.b"), bind, &h)?;
    Ok(x.add(&h)?)
}

/// Registers the tensors of one layer: unit-normal raw weight, zero bias,
/// and batch-norm affine parameters and running statistics when used.
pub fn init_layer(spec: &LayerSpec, name: &str, rng: &mut impl Rng, params: &mut ParamSet) -> Result<()> {
    spec.validate()?;
    let shape = spec.weight_shape();
    let weight = Tensor::from_fn(&shape, |_| rng.sample(StandardNormal));
    params.push(format!("{name}.weight"), weight, true)?;
    params.push(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]), true)?;
    if spec.norm == NormKind::BatchNorm {
        let c = spec.out_channels;
        params.push(format!("{name}.gamma"), Tensor::ones(&[c]), true)?;
        params.push(format!("{name}.beta"), Tensor::zeros(&[c]), true)?;
        params.push(format!("{name}.running_mean"), Tensor::zeros(&[c]), false)?;
        params.push(format!("{name}.running_var"), Tensor::ones(&[c]), false)?;
    }
    Ok(())
}
