//! Differentiable primitives.
//!
//! Every backward rule is written in terms of these same primitives, so a
//! gradient computed with `create_graph` can be differentiated again.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;
use crate::var::Var;

pub(crate) enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Expand(Var),
    SumLast(Var),
    ExpandLast(Var),
    SumLeading(Var),
    ExpandLeading(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    Conv(Var, Var, ConvGeometry),
    ConvTranspose(Var, Var, ConvGeometry),
    ConvWeightGrad(Var, Var, ConvGeometry),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Var> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![a, b],
            Conv(a, b, _) | ConvTranspose(a, b, _) | ConvWeightGrad(a, b, _) => vec![a, b],
            MulConst(a, _) | Scale(a, _) | AddScalar(a) | Pow(a, _) | Log(a) | Exp(a)
            | Sigmoid(a) | LeakyRelu(a, _) | Clamp(a, _, _) | Sum(a) | Expand(a) | SumLast(a)
            | ExpandLast(a) | SumLeading(a) | ExpandLeading(a) | Reshape(a) | Transpose(a)
            | Softmax(a) => vec![a],
        }
    }

    /// Vector-Jacobian products for each parent, given the upstream gradient
    /// `g` of the node `out` that this op produced.
    pub(crate) fn backward(&self, out: &Var, g: &Var, create_graph: bool) -> Result<Vec<(Var, Var)>> {
        use Op::*;
        let keep = |v: &Var| if create_graph { v.clone() } else { v.detach() };
        let g = &keep(g);
        Ok(match self {
            Add(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.clone())],
            Sub(a, b) => vec![(a.clone(), g.clone()), (b.clone(), g.scale(-1.0)?)],
            Mul(a, b) => vec![(a.clone(), g.mul(&keep(b))?), (b.clone(), g.mul(&keep(a))?)],
            MulConst(a, c) => vec![(a.clone(), g.mul_const(c)?)],
            Scale(a, k) => vec![(a.clone(), g.scale(*k)?)],
            AddScalar(a) => vec![(a.clone(), g.clone())],
            Pow(a, p) => {
                let d = keep(a).powf(p - 1.0)?.scale(*p)?;
                vec![(a.clone(), g.mul(&d)?)]
            }
            Log(a) => vec![(a.clone(), g.mul(&keep(a).powf(-1.0)?)?)],
            Exp(a) => vec![(a.clone(), g.mul(&keep(out))?)],
            Sigmoid(a) => {
                let y = keep(out);
                let d = y.mul(&y.scale(-1.0)?.add_scalar(1.0)?)?;
                vec![(a.clone(), g.mul(&d)?)]
            }
            LeakyRelu(a, slope) => {
                let mask = a.value().map(|v| if v > 0.0 { 1.0 } else { *slope });
                vec![(a.clone(), g.mul_const(&mask)?)]
            }
            Clamp(a, lo, hi) => {
                let mask = a.value().map(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                vec![(a.clone(), g.mul_const(&mask)?)]
            }
            Sum(a) => vec![(a.clone(), g.expand(a.shape())?)],
            Expand(a) => vec![(a.clone(), g.sum()?.reshape(a.shape())?)],
            SumLast(a) => {
                let c = *a.shape().last().expect("rank checked in forward");
                vec![(a.clone(), g.expand_last(c)?)]
            }
            ExpandLast(a) => vec![(a.clone(), g.sum_last()?)],
            SumLeading(a) => vec![(a.clone(), g.expand_leading(a.shape())?)],
            ExpandLeading(a) => vec![(a.clone(), g.sum_leading()?)],
            Reshape(a) => vec![(a.clone(), g.reshape(a.shape())?)],
            MatMul(a, b) => vec![
                (a.clone(), g.matmul(&keep(b).transpose()?)?),
                (b.clone(), keep(a).transpose()?.matmul(g)?),
            ],
            Transpose(a) => vec![(a.clone(), g.transpose()?)],
            Softmax(a) => {
                let y = keep(out);
                let s = g.mul(&y)?.sum_last()?;
                let c = *a.shape().last().expect("rank checked in forward");
                vec![(a.clone(), y.mul(&g.sub(&s.expand_last(c)?)?)?)]
            }
            Conv(x, w, geom) => vec![
                (x.clone(), conv_transpose_raw(g, &keep(w), geom)?),
                (w.clone(), conv_weight_grad_raw(&keep(x), g, geom)?),
            ],
            ConvTranspose(y, w, geom) => vec![
                (y.clone(), conv_raw(g, &keep(w), geom)?),
                (w.clone(), conv_weight_grad_raw(g, &keep(y), geom)?),
            ],
            ConvWeightGrad(x, y, geom) => vec![
                (x.clone(), conv_transpose_raw(&keep(y), g, geom)?),
                (y.clone(), conv_raw(&keep(x), g, geom)?),
            ],
        })
    }
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes already matched")
}

fn last_axis(op: &'static str, v: &Var) -> Result<usize> {
    match v.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(TensorError::shape(op, format!("needs a non-empty last axis, got {:?}", v.shape()))),
    }
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        same_shape("add", self, other)?;
        let v = zip_map(self.value(), other.value(), |a, b| a + b);
        Var::from_op(v, Op::Add(self.clone(), other.clone()), "add")
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        same_shape("sub", self, other)?;
        let v = zip_map(self.value(), other.value(), |a, b| a - b);
        Var::from_op(v, Op::Sub(self.clone(), other.clone()), "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        same_shape("mul", self, other)?;
        let v = zip_map(self.value(), other.value(), |a, b| a * b);
        Var::from_op(v, Op::Mul(self.clone(), other.clone()), "mul")
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var> {
        if self.shape() != c.shape() {
            return Err(TensorError::shape("mul_const", format!("{:?} vs {:?}", self.shape(), c.shape())));
        }
        let v = zip_map(self.value(), c, |a, b| a * b);
        Var::from_op(v, Op::MulConst(self.clone(), c.clone()), "mul_const")
    }

    pub fn scale(&self, k: f64) -> Result<Var> {
        Var::from_op(self.value().map(|a| a * k), Op::Scale(self.clone(), k), "scale")
    }

    pub fn add_scalar(&self, k: f64) -> Result<Var> {
        Var::from_op(self.value().map(|a| a + k), Op::AddScalar(self.clone()), "add_scalar")
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn powf(&self, p: f64) -> Result<Var> {
        Var::from_op(self.value().map(|a| a.powf(p)), Op::Pow(self.clone(), p), "pow")
    }

    pub fn sqrt(&self) -> Result<Var> {
        self.powf(0.5)
    }

    /// Natural logarithm; non-positive inputs are a numeric error.
    pub fn log(&self) -> Result<Var> {
        Var::from_op(self.value().map(f64::ln), Op::Log(self.clone()), "log")
    }

    pub fn exp(&self) -> Result<Var> {
        Var::from_op(self.value().map(f64::exp), Op::Exp(self.clone()), "exp")
    }

    pub fn sigmoid(&self) -> Result<Var> {
        let v = self.value().map(|a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        });
        Var::from_op(v, Op::Sigmoid(self.clone()), "sigmoid")
    }

    /// `max(x, slope * x)`. The derivative at exactly zero is `slope`.
    pub fn leaky_relu(&self, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(TensorError::Usage(format!("leaky_relu slope {slope} outside [0, 1)")));
        }
        let v = self.value().map(|a| if a > 0.0 { a } else { slope * a });
        Var::from_op(v, Op::LeakyRelu(self.clone(), slope), "leaky_relu")
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value().map(|a| a.clamp(lo, hi));
        Var::from_op(v, Op::Clamp(self.clone(), lo, hi), "clamp")
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var> {
        Var::from_op(Tensor::scalar(self.value().sum()), Op::Sum(self.clone()), "sum")
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::shape("mean", "empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var> {
        let v = self.item().map_err(|_| {
            TensorError::shape("expand", format!("source must hold one value, got {:?}", self.shape()))
        })?;
        Var::from_op(Tensor::full(shape, v), Op::Expand(self.clone()), "expand")
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last(&self) -> Result<Var> {
        let c = last_axis("sum_last", self)?;
        let data = self.value().data().chunks_exact(c).map(|r| r.iter().sum()).collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        Var::from_op(Tensor::new(&shape, data)?, Op::SumLast(self.clone()), "sum_last")
    }

    /// Repeat a trailing axis of extent 1 to extent `c`.
    pub fn expand_last(&self, c: usize) -> Result<Var> {
        if self.shape().last() != Some(&1) {
            return Err(TensorError::shape("expand_last", format!("last axis must be 1, got {:?}", self.shape())));
        }
        let data = self.value().data().iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        Var::from_op(Tensor::new(&shape, data)?, Op::ExpandLast(self.clone()), "expand_last")
    }

    /// Sum over every axis but the last: `[..., c] -> [c]`.
    pub fn sum_leading(&self) -> Result<Var> {
        let c = last_axis("sum_leading", self)?;
        let mut acc = vec![0.0; c];
        for row in self.value().data().chunks_exact(c) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        Var::from_op(Tensor::new(&[c], acc)?, Op::SumLeading(self.clone()), "sum_leading")
    }

    /// Broadcast a `[c]` vector along the leading axes of `shape = [..., c]`.
    pub fn expand_leading(&self, shape: &[usize]) -> Result<Var> {
        if self.rank() != 1 || shape.last() != self.shape().first() {
            return Err(TensorError::shape(
                "expand_leading",
                format!("cannot broadcast {:?} to {shape:?}", self.shape()),
            ));
        }
        let reps: usize = shape[..shape.len() - 1].iter().product();
        let src = self.value().data();
        let mut data = Vec::with_capacity(reps * src.len());
        for _ in 0..reps {
            data.extend_from_slice(src);
        }
        Var::from_op(Tensor::new(shape, data)?, Op::ExpandLeading(self.clone()), "expand_leading")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        Var::from_op(self.value().reshape(shape)?, Op::Reshape(self.clone()), "reshape")
    }

    /// `[b, ...] -> [b, prod(...)]`
    pub fn flatten(&self) -> Result<Var> {
        let b = *self
            .shape()
            .first()
            .ok_or_else(|| TensorError::shape("flatten", "rank-0 input"))?;
        let rest = self.shape()[1..].iter().product();
        self.reshape(&[b, rest])
    }

    pub fn rank(&self) -> usize {
        self.shape().len()
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(TensorError::shape("matmul", format!("{a:?} x {b:?}")));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let data = kernels::matmul(self.value().data(), other.value().data(), m, k, n);
        Var::from_op(Tensor::new(&[m, n], data)?, Op::MatMul(self.clone(), other.clone()), "matmul")
    }

    pub fn transpose(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::shape("transpose", format!("expects rank 2, got {s:?}")));
        }
        let data = kernels::transpose(self.value().data(), s[0], s[1]);
        Var::from_op(Tensor::new(&[s[1], s[0]], data)?, Op::Transpose(self.clone()), "transpose")
    }

    /// Softmax over the last (channel) axis.
    pub fn softmax_channels(&self) -> Result<Var> {
        let c = last_axis("softmax", self)?;
        let data = kernels::softmax_rows(self.value().data(), c);
        Var::from_op(Tensor::new(self.shape(), data)?, Op::Softmax(self.clone()), "softmax")
    }

    /// Add a per-channel bias `[c]` to a channels-last tensor.
    pub fn add_channel_bias(&self, bias: &Var) -> Result<Var> {
        self.add(&bias.expand_leading(self.shape())?)
    }

    /// 3D convolution of `[b, d, h, w, cin]` with weight `[kd, kh, kw, cin, cout]`.
    pub fn conv3d(&self, weight: &Var, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        let geom = conv_geometry(self.shape(), weight.shape(), stride, padding)?;
        conv_raw(self, weight, &geom)
    }

    /// Transposed 3D convolution; the adjoint of [`Var::conv3d`] with the same
    /// weight, stride and padding.
    ///
    /// The weight is laid out as the convolution being transposed:
    /// `[kd, kh, kw, cout, cin]` where `cin` is this input's channel count.
    /// Output extent per axis is `(in - 1) * stride - 2 * pad + kernel`.
    pub fn conv3d_transpose(&self, weight: &Var, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        let geom = conv_transpose_geometry(self.shape(), weight.shape(), stride, padding)?;
        conv_transpose_raw(self, weight, &geom)
    }
}

fn spatial(op: &'static str, shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() != 5 {
        return Err(TensorError::shape(op, format!("expects (b, d, h, w, c), got {shape:?}")));
    }
    Ok([shape[1], shape[2], shape[3]])
}

fn check_stride(op: &'static str, stride: [usize; 3]) -> Result<()> {
    if stride.contains(&0) {
        return Err(TensorError::shape(op, format!("stride components must be >= 1, got {stride:?}")));
    }
    Ok(())
}

pub fn conv_geometry(
    input: &[usize],
    weight: &[usize],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<ConvGeometry> {
    let ins = spatial("conv3d", input)?;
    if weight.len() != 5 || weight[3] != input[4] {
        return Err(TensorError::shape(
            "conv3d",
            format!("weight {weight:?} does not match input channels of {input:?}"),
        ));
    }
    check_stride("conv3d", stride)?;
    let kernel = [weight[0], weight[1], weight[2]];
    let mut output = [0; 3];
    for a in 0..3 {
        let padded = ins[a] + 2 * padding[a];
        if kernel[a] == 0 || kernel[a] > padded {
            return Err(TensorError::shape(
                "conv3d",
                format!("kernel {kernel:?} exceeds padded input {ins:?} + 2*{padding:?}"),
            ));
        }
        output[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    Ok(ConvGeometry {
        batch: input[0],
        input: ins,
        output,
        kernel,
        stride,
        padding,
        in_channels: weight[3],
        out_channels: weight[4],
    })
}

pub fn conv_transpose_geometry(
    input: &[usize],
    weight: &[usize],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<ConvGeometry> {
    let ins = spatial("conv3d_transpose", input)?;
    if weight.len() != 5 || weight[4] != input[4] {
        return Err(TensorError::shape(
            "conv3d_transpose",
            format!("weight {weight:?} does not match input channels of {input:?}"),
        ));
    }
    check_stride("conv3d_transpose", stride)?;
    let kernel = [weight[0], weight[1], weight[2]];
    let mut output = [0; 3];
    for a in 0..3 {
        let full = (ins[a] - 1) * stride[a] + kernel[a];
        if ins[a] == 0 || full <= 2 * padding[a] {
            return Err(TensorError::shape(
                "conv3d_transpose",
                format!("input {ins:?} with kernel {kernel:?}, padding {padding:?} has empty output"),
            ));
        }
        output[a] = full - 2 * padding[a];
    }
    // `output` is the convolution input in the adjoint geometry.
    Ok(ConvGeometry {
        batch: input[0],
        input: output,
        output: ins,
        kernel,
        stride,
        padding,
        in_channels: weight[3],
        out_channels: weight[4],
    })
}

fn conv_raw(x: &Var, w: &Var, geom: &ConvGeometry) -> Result<Var> {
    debug_assert_eq!(x.shape(), geom.input_shape().as_slice());
    let data = kernels::conv_forward(geom, x.value().data(), w.value().data());
    let out = Tensor::new(&geom.output_shape(), data)?;
    Var::from_op(out, Op::Conv(x.clone(), w.clone(), *geom), "conv3d")
}

fn conv_transpose_raw(y: &Var, w: &Var, geom: &ConvGeometry) -> Result<Var> {
    debug_assert_eq!(y.shape(), geom.output_shape().as_slice());
    let data = kernels::conv_input_grad(geom, y.value().data(), w.value().data());
    let out = Tensor::new(&geom.input_shape(), data)?;
    Var::from_op(out, Op::ConvTranspose(y.clone(), w.clone(), *geom), "conv3d_transpose")
}

fn conv_weight_grad_raw(x: &Var, y: &Var, geom: &ConvGeometry) -> Result<Var> {
    let data = kernels::conv_weight_grad(geom, x.value().data(), y.value().data());
    let out = Tensor::new(&geom.weight_shape(), data)?;
    Var::from_op(out, Op::ConvWeightGrad(x.clone(), y.clone(), *geom), "conv3d_weight_grad")
}
