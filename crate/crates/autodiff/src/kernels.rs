//! Raw slice kernels. All loops run in a fixed order so results are
//! bit-reproducible.

/// Geometry shared by a convolution and its two adjoints.
///
/// The three kernels below are the partial derivatives of the trilinear form
/// `T(x, w, y) = sum x[o*s + k - p, ci] * w[k, ci, co] * y[o, co]`
/// with respect to `y` (forward), `x` (input gradient / transposed
/// convolution) and `w` (weight gradient).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    /// Spatial extent of the convolution input.
    pub input: [usize; 3],
    /// Spatial extent of the convolution output.
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn input_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.input;
        vec![self.batch, d, h, w, self.in_channels]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.output;
        vec![self.batch, d, h, w, self.out_channels]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let [kd, kh, kw] = self.kernel;
        vec![kd, kh, kw, self.in_channels, self.out_channels]
    }

    /// Input coordinate hit by output index `o` and kernel tap `k` on `axis`.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let z = o * self.stride[axis] + k;
        let p = self.padding[axis];
        if z < p || z - p >= self.input[axis] {
            None
        } else {
            Some(z - p)
        }
    }

    /// Output index fed by input coordinate `i` through kernel tap `k`.
    #[inline]
    fn target(&self, axis: usize, i: usize, k: usize) -> Option<usize> {
        let t = i + self.padding[axis];
        if t < k {
            return None;
        }
        let t = t - k;
        let s = self.stride[axis];
        if !t.is_multiple_of(s) || t / s >= self.output[axis] {
            None
        } else {
            Some(t / s)
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub fn conv_forward(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let (ci, co) = (g.in_channels, g.out_channels);
    let mut y = vec![0.0; g.batch * od * oh * ow * co];
    for b in 0..g.batch {
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let ybase = (((b * od + zd) * oh + zh) * ow + zw) * co;
                    let yrow = &mut y[ybase..ybase + co];
                    for td in 0..kd {
                        let Some(xd) = g.source(0, zd, td) else { continue };
                        for th in 0..kh {
                            let Some(xh) = g.source(1, zh, th) else { continue };
                            for tw in 0..kw {
                                let Some(xw) = g.source(2, zw, tw) else { continue };
                                let xbase = (((b * id + xd) * ih + xh) * iw + xw) * ci;
                                let wbase = ((td * kh + th) * kw + tw) * ci * co;
                                for c in 0..ci {
                                    let xv = x[xbase + c];
                                    if xv != 0.0 {
                                        let wrow = &w[wbase + c * co..wbase + (c + 1) * co];
                                        axpy(xv, wrow, yrow);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv_forward`] in its input: maps an output-shaped tensor
/// back to input shape. This is the transposed convolution.
pub fn conv_input_grad(g: &ConvGeometry, y: &[f64], w: &[f64]) -> Vec<f64> {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let (ci, co) = (g.in_channels, g.out_channels);
    let mut x = vec![0.0; g.batch * id * ih * iw * ci];
    for b in 0..g.batch {
        for xd in 0..id {
            for xh in 0..ih {
                for xw in 0..iw {
                    let xbase = (((b * id + xd) * ih + xh) * iw + xw) * ci;
                    let xrow = &mut x[xbase..xbase + ci];
                    for td in 0..kd {
                        let Some(zd) = g.target(0, xd, td) else { continue };
                        for th in 0..kh {
                            let Some(zh) = g.target(1, xh, th) else { continue };
                            for tw in 0..kw {
                                let Some(zw) = g.target(2, xw, tw) else { continue };
                                let ybase = (((b * od + zd) * oh + zh) * ow + zw) * co;
                                let yrow = &y[ybase..ybase + co];
                                let wbase = ((td * kh + th) * kw + tw) * ci * co;
                                for (c, xv) in xrow.iter_mut().enumerate() {
                                    *xv += dot(yrow, &w[wbase + c * co..wbase + (c + 1) * co]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Adjoint of [`conv_forward`] in its weight.
pub fn conv_weight_grad(g: &ConvGeometry, x: &[f64], y: &[f64]) -> Vec<f64> {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let (ci, co) = (g.in_channels, g.out_channels);
    let mut w = vec![0.0; kd * kh * kw * ci * co];
    for b in 0..g.batch {
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let ybase = (((b * od + zd) * oh + zh) * ow + zw) * co;
                    let yrow = &y[ybase..ybase + co];
                    for td in 0..kd {
                        let Some(xd) = g.source(0, zd, td) else { continue };
                        for th in 0..kh {
                            let Some(xh) = g.source(1, zh, th) else { continue };
                            for tw in 0..kw {
                                let Some(xw) = g.source(2, zw, tw) else { continue };
                                let xbase = (((b * id + xd) * ih + xh) * iw + xw) * ci;
                                let wbase = ((td * kh + th) * kw + tw) * ci * co;
                                for c in 0..ci {
                                    let xv = x[xbase + c];
                                    if xv != 0.0 {
                                        axpy(xv, yrow, &mut w[wbase + c * co..wbase + (c + 1) * co]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    w
}

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Softmax over contiguous rows of length `width`, with max subtraction.
pub fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}
