//! Forward and backward kernels for the dense layers.
//!
//! Convolutions are lowered to `im2col` + GEMM. The transposed convolution is
//! literally the input-gradient of the convolution, which makes the two exact
//! adjoints of each other.

use super::{check_dim, Result, Scalar, Shape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(slope)
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(slope)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < k || self.stride == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }

    pub fn transposed_len(&self, len: usize, k: usize) -> Option<usize> {
        ((len - 1) * self.stride + k).checked_sub(2 * self.pad).filter(|&v| v > 0)
    }
}

/// Unfolds one `(c, h, w)` item into a `(c*kh*kw) x (ho*wo)` matrix.
/// Output columns `lo..hi` whose tap `kx` lands inside a row of width `w`.
fn valid_columns(g: ConvGeometry, kx: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(wo);
    let hi = if w + g.pad > kx {
        (w + g.pad - kx).div_ceil(g.stride).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_columns(g, kx, w, wo);
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (d, &v) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_columns(g, kx, w, wo);
                    if lo < hi {
                        let start = lo * g.stride + kx - g.pad;
                        let line = &src[oy * wo + lo..oy * wo + hi];
                        for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(line) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// `out (m x n) = beta*out + a (m x k, row-major) * b (k x n, row-major)`, with
/// optional transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    beta: T,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against the dimensions above and `out`
    // is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn validate_conv(
    op: &'static str,
    x: Shape,
    w: Shape,
    bias: Option<Shape>,
    stride: usize,
    pad: usize,
) -> Result<(ConvGeometry, usize, usize)> {
    check_dim(op, "input channels", w.c(), x.c())?;
    if let Some(b) = bias {
        check_dim(op, "bias length", w.n(), b.len())?;
    }
    if stride == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: "stride must be at least 1".into(),
        });
    }
    let g = ConvGeometry {
        kh: w.h(),
        kw: w.w(),
        stride,
        pad,
    };
    let ho = g.out_len(x.h(), g.kh).ok_or_else(|| TensorError::Invalid {
        op,
        msg: format!("kernel height {} exceeds padded input height {}", g.kh, x.h() + 2 * pad),
    })?;
    let wo = g.out_len(x.w(), g.kw).ok_or_else(|| TensorError::Invalid {
        op,
        msg: format!("kernel width {} exceeds padded input width {}", g.kw, x.w() + 2 * pad),
    })?;
    Ok((g, ho, wo))
}

fn add_bias<T: Scalar>(y: &mut Tensor<T>, bias: &Tensor<T>) {
    let s = y.shape();
    let plane = s.plane();
    let b = bias.data().to_vec();
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let v = b[i % s.c()];
        chunk.iter_mut().for_each(|e| *e = *e + v);
    }
}

pub(crate) fn bias_grad<T: Scalar>(gy: &Tensor<T>) -> Tensor<T> {
    let s = gy.shape();
    let mut out = vec![T::zero(); s.c()];
    for (i, chunk) in gy.data().chunks(s.plane()).enumerate() {
        let acc = &mut out[i % s.c()];
        *acc = chunk.iter().fold(*acc, |a, &v| a + v);
    }
    Tensor::from_vec(Shape::new(1, 1, 1, s.c()), out).expect("bias shape")
}

/// Zero-padded cross-correlation, weight layout `(out_c, in_c, kh, kw)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let (g, ho, wo) = validate_conv("conv2d", xs, ws, bias.map(|b| b.shape()), stride, pad)?;
    let k = ws.c() * g.kh * g.kw;
    let p = ho * wo;
    let mut y = Tensor::zeros(Shape::new(xs.n(), ws.n(), ho, wo));
    let mut cols = vec![T::zero(); k * p];
    let out_len = ws.n() * p;
    for n in 0..xs.n() {
        im2col(x.item(n), xs.c(), xs.h(), xs.w(), g, ho, wo, &mut cols);
        let dst = &mut y.data_mut()[n * out_len..(n + 1) * out_len];
        matmul(ws.n(), k, p, w.data(), false, &cols, false, T::zero(), dst);
    }
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    Ok(y)
}

/// Gradient of [`conv2d`] with respect to its input; equivalently the
/// transposed convolution of `gy` producing a tensor of `input_shape`.
pub fn conv2d_backward_data<T: Scalar>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    input_shape: Shape,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (gs, ws) = (gy.shape(), w.shape());
    let g = ConvGeometry {
        kh: ws.h(),
        kw: ws.w(),
        stride,
        pad,
    };
    let k = ws.c() * g.kh * g.kw;
    let p = gs.plane();
    let mut gx = Tensor::zeros(input_shape);
    let mut cols = vec![T::zero(); k * p];
    let item_len = input_shape.c() * input_shape.plane();
    for n in 0..gs.n() {
        matmul(k, ws.n(), p, w.data(), true, gy.item(n), false, T::zero(), &mut cols);
        let dst = &mut gx.data_mut()[n * item_len..(n + 1) * item_len];
        col2im(
            &cols,
            input_shape.c(),
            input_shape.h(),
            input_shape.w(),
            g,
            gs.h(),
            gs.w(),
            dst,
        );
    }
    gx
}

/// Gradient of [`conv2d`] with respect to its weight, summed over the batch.
pub fn conv2d_backward_weight<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    weight_shape: Shape,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (xs, gs) = (x.shape(), gy.shape());
    let g = ConvGeometry {
        kh: weight_shape.h(),
        kw: weight_shape.w(),
        stride,
        pad,
    };
    let k = weight_shape.c() * g.kh * g.kw;
    let p = gs.plane();
    let mut gw = Tensor::zeros(weight_shape);
    let mut cols = vec![T::zero(); k * p];
    for n in 0..xs.n() {
        im2col(x.item(n), xs.c(), xs.h(), xs.w(), g, gs.h(), gs.w(), &mut cols);
        let beta = if n == 0 { T::zero() } else { T::one() };
        matmul(weight_shape.n(), p, k, gy.item(n), false, &cols, true, beta, gw.data_mut());
    }
    gw
}

/// Transposed convolution, weight layout `(in_c, out_c, kh, kw)` so that the
/// same tensor serves as the weight of the adjoint [`conv2d`].
pub fn transposed_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let out = transposed_output_shape(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        check_dim("transposed_conv2d", "bias length", w.shape().c(), b.shape().len())?;
    }
    let mut y = conv2d_backward_data(x, w, out, stride, pad);
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    Ok(y)
}

pub(crate) fn transposed_output_shape(
    x: Shape,
    w: Shape,
    stride: usize,
    pad: usize,
) -> Result<Shape> {
    const OP: &str = "transposed_conv2d";
    check_dim(OP, "input channels", w.n(), x.c())?;
    if stride == 0 {
        return Err(TensorError::Invalid {
            op: OP,
            msg: "stride must be at least 1".into(),
        });
    }
    let g = ConvGeometry {
        kh: w.h(),
        kw: w.w(),
        stride,
        pad,
    };
    let (h, wd) = match (g.transposed_len(x.h(), g.kh), g.transposed_len(x.w(), g.kw)) {
        (Some(h), Some(wd)) => (h, wd),
        _ => {
            return Err(TensorError::Invalid {
                op: OP,
                msg: format!("padding {pad} leaves an empty output"),
            })
        }
    };
    Ok(Shape::new(x.n(), w.c(), h, wd))
}

/// Max-pooling without padding. Returns the output and, for each output cell,
/// the flat index of the winning input cell (first maximum in row-major order).
pub fn maxpool<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "maxpool";
    let s = x.shape();
    if window == 0 || stride == 0 {
        return Err(TensorError::Invalid {
            op: OP,
            msg: "window and stride must be at least 1".into(),
        });
    }
    if window > s.h() || window > s.w() {
        return Err(TensorError::Invalid {
            op: OP,
            msg: format!("window {window} larger than input {}x{}", s.h(), s.w()),
        });
    }
    let ho = (s.h() - window) / stride + 1;
    let wo = (s.w() - window) / stride + 1;
    let out_shape = Shape::new(s.n(), s.c(), ho, wo);
    let mut y = Vec::with_capacity(out_shape.len());
    let mut arg = Vec::with_capacity(out_shape.len());
    let data = x.data();
    for nc in 0..s.n() * s.c() {
        let base = nc * s.plane();
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * s.w() + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let i = base + (oy * stride + ky) * s.w() + ox * stride + kx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                y.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, y)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution, kept independent of the im2col path.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let ho = (xs.h() + 2 * pad - ws.h()) / stride + 1;
        let wo = (xs.w() + 2 * pad - ws.w()) / stride + 1;
        Tensor::from_fn(Shape::new(xs.n(), ws.n(), ho, wo), |n, o, oy, ox| {
            let mut acc = b.data()[o];
            for c in 0..ws.c() {
                for ky in 0..ws.h() {
                    for kx in 0..ws.w() {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h() && (ix as usize) < xs.w() {
                            acc += x.at(n, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_scalar_scaling() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 3, 3));
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 2.0);
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y, Tensor::full(Shape::new(1, 1, 3, 3), 2.0));
    }

    #[test]
    fn conv_single_window_is_dot_product() {
        let x = Tensor::from_vec(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::from_vec(Shape::new(1, 1, 3, 3), (0..9).map(|v| f64::from(v) * 0.5 - 1.0).collect()).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data()[0], x.dot(&w));
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(Shape::new(2, 3, 8, 8), -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(Shape::new(4, 3, 3, 3), -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(Shape::new(1, 1, 1, 4), -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &w, Some(&b), 2, 1).unwrap();
        let expect = conv_oracle(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), Shape::new(2, 4, 4, 4));
        for (a, e) in y.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 3, 3, 3));
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let w = Tensor::zeros(Shape::new(1, 1, 5, 5));
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn transposed_broadcasts_disjoint_blocks() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f64>::ones(Shape::new(1, 1, 2, 2));
        let y = transposed_conv2d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        #[rustfmt::skip]
        let expect = [1., 1., 2., 2.,
                      1., 1., 2., 2.,
                      3., 3., 4., 4.,
                      3., 3., 4., 4.];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn transposed_of_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::<f64>::uniform(Shape::new(3, 2, 4, 4), -1.0, 1.0, &mut rng);
        let y = transposed_conv2d(&Tensor::zeros(Shape::new(1, 3, 5, 5)), &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 10, 10));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_single_window() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_ties_pick_first_in_scan_order() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 4, 4), 7.0);
        let (y, arg) = maxpool(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, &mut rng);
        let (y, _) = maxpool(&x, 2, 2).unwrap();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(0, c, 2 * oy + dy, 2 * ox + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y.at(0, c, oy, ox), m);
                }
            }
        }
    }

    #[test]
    fn maxpool_rejects_large_window() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        assert!(maxpool(&x, 3, 1).is_err());
    }

    #[test]
    fn activations_at_known_points() {
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::LeakyRelu(0.1).apply(-1.0f64), -0.1);
        assert_eq!(Activation::LeakyRelu(0.1).apply(2.0f64), 2.0);
        assert_eq!(Activation::Sigmoid.apply(1e3f64), 1.0);
        assert!(Activation::Sigmoid.apply(-1e3f64) >= 0.0);
    }
}
