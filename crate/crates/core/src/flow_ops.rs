//! Flow-specific differentiable operators: the correlation cost volume,
//! bilinear warping, and the endpoint-error / feature-reconstruction losses.
//!
//! Flow fields are `(batch, 2, h, w)` tensors: channel 0 is the horizontal
//! displacement `u` (positive to the right), channel 1 the vertical `v`
//! (positive downwards), both in pixels of the field's own resolution.
//! Flow maps frame A onto frame B: pixel `p` of A lands on `p + flow(p)` in B.

use crate::tensor::tape::Op;
use crate::tensor::{check_dim, Result, Scalar, Shape, Tape, Tensor, TensorError, Var};

/// Regularizer inside every square root of the losses; keeps the gradient
/// bounded at zero residual.
pub const NORM_EPS: f64 = 1e-8;

/// Default balance between the supervised and reconstruction terms.
pub const DEFAULT_LAMBDA: f64 = 0.005;

/// Channel holding displacement `(dy, dx)` in a volume with maximum displacement `d`.
pub fn displacement_channel(dy: isize, dx: isize, d: usize) -> usize {
    let side = 2 * d as isize + 1;
    ((dy + d as isize) * side + dx + d as isize) as usize
}

/// Inverse of [`displacement_channel`].
pub fn channel_displacement(c: usize, d: usize) -> (isize, isize) {
    let side = 2 * d + 1;
    ((c / side) as isize - d as isize, (c % side) as isize - d as isize)
}

/// Number of channels in a volume with maximum displacement `d`.
pub fn volume_channels(d: usize) -> usize {
    (2 * d + 1) * (2 * d + 1)
}

/// Indices `i` in `0..len` with both `i + a` and `i + b` inside `0..len`.
fn overlap(len: usize, a: isize, b: isize) -> std::ops::Range<usize> {
    let lo = 0.max(-a).max(-b);
    let hi = (len as isize).min(len as isize - a).min(len as isize - b);
    if hi <= lo {
        0..0
    } else {
        lo as usize..hi as usize
    }
}

fn check_same(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    for (i, dim) in ["batch", "channels", "height", "width"].into_iter().enumerate() {
        check_dim(op, dim, a.0[i], b.0[i])?;
    }
    Ok(())
}

/// Visits the correlation's product terms as contiguous runs: for each call
/// `f(a, b, out, len)`, terms `a + t`, `b + t`, `out + t` for `t < len` pair up.
fn for_each_run(s: Shape, d: usize, k: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (h, w, plane) = (s.h(), s.w(), s.plane());
    let side = 2 * d + 1;
    let ki = k as isize;
    for n in 0..s.n() {
        for c in 0..side * side {
            let (dy, dx) = channel_displacement(c, d);
            let out_base = (n * side * side + c) * plane;
            for oy in -ki..=ki {
                let rows = overlap(h, oy, oy + dy);
                for ox in -ki..=ki {
                    let cols = overlap(w, ox, ox + dx);
                    if cols.is_empty() {
                        continue;
                    }
                    let j = cols.start;
                    for ch in 0..s.c() {
                        let base = (n * s.c() + ch) * plane;
                        for i in rows.clone() {
                            let arow = base + (i as isize + oy) as usize * w;
                            let brow = base + (i as isize + oy + dy) as usize * w;
                            f(
                                arow + (j as isize + ox) as usize,
                                brow + (j as isize + ox + dx) as usize,
                                out_base + i * w + j,
                                cols.len(),
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Normalized patch correlation between two feature maps.
///
/// `out[n, c(dy,dx), i, j] = 1/(C (2k+1)^2) * sum over patch offsets o and
/// channels of A[i+o] * B[i+(dy,dx)+o]`, with out-of-range samples as zero.
pub fn correlation<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, max_disp: usize, patch: usize) -> Result<Tensor<T>> {
    check_same("correlation", a.shape(), b.shape())?;
    let s = a.shape();
    let mut out = vec![T::zero(); s.n() * volume_channels(max_disp) * s.plane()];
    let (ad, bd) = (a.data(), b.data());
    for_each_run(s, max_disp, patch, |ia, ib, io, len| {
        for ((o, &x), &y) in out[io..io + len].iter_mut().zip(&ad[ia..ia + len]).zip(&bd[ib..ib + len]) {
            *o = *o + x * y;
        }
    });
    let norm = T::one() / T::of((s.c() * (2 * patch + 1) * (2 * patch + 1)) as f64);
    out.iter_mut().for_each(|v| *v = *v * norm);
    Tensor::from_vec(Shape::new(s.n(), volume_channels(max_disp), s.h(), s.w()), out)
}

pub(crate) fn correlation_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    max_disp: usize,
    patch: usize,
) -> (Tensor<T>, Tensor<T>) {
    let s = a.shape();
    let norm = T::one() / T::of((s.c() * (2 * patch + 1) * (2 * patch + 1)) as f64);
    let gs: Vec<T> = g.data().iter().map(|&v| v * norm).collect();
    let mut ga = Tensor::zeros(s);
    let mut gb = Tensor::zeros(s);
    {
        let (ad, bd) = (a.data(), b.data());
        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
        // Two passes keep the two mutable buffers out of a single closure.
        for_each_run(s, max_disp, patch, |ia, ib, io, len| {
            for ((ga, &g), &y) in gad[ia..ia + len].iter_mut().zip(&gs[io..io + len]).zip(&bd[ib..ib + len]) {
                *ga = *ga + g * y;
            }
        });
        for_each_run(s, max_disp, patch, |ia, ib, io, len| {
            for ((gb, &g), &x) in gbd[ib..ib + len].iter_mut().zip(&gs[io..io + len]).zip(&ad[ia..ia + len]) {
                *gb = *gb + g * x;
            }
        });
    }
    (ga, gb)
}

struct Corners<T> {
    y0: isize,
    x0: isize,
    fy: T,
    fx: T,
}

fn corners<T: Scalar>(y: usize, x: usize, u: T, v: T) -> Corners<T> {
    let sx = T::of(x as f64) + u;
    let sy = T::of(y as f64) + v;
    let (x0, y0) = (sx.floor(), sy.floor());
    Corners {
        y0: y0.to_isize().unwrap_or(isize::MIN / 2),
        x0: x0.to_isize().unwrap_or(isize::MIN / 2),
        fy: sy - y0,
        fx: sx - x0,
    }
}

fn check_warp(image: Shape, flow: Shape) -> Result<()> {
    const OP: &str = "bilinear_warp";
    check_dim(OP, "flow channels", 2, flow.c())?;
    check_dim(OP, "batch", image.n(), flow.n())?;
    check_dim(OP, "height", image.h(), flow.h())?;
    check_dim(OP, "width", image.w(), flow.w())
}

/// Samples `image` at `p + flow(p)` with tent (bilinear) weights; samples
/// outside the image contribute zero.
pub fn bilinear_warp<T: Scalar>(image: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    check_warp(image.shape(), flow.shape())?;
    let s = image.shape();
    let (h, w) = (s.h() as isize, s.w() as isize);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n() {
        for y in 0..s.h() {
            for x in 0..s.w() {
                let cr = corners(y, x, flow.at(n, 0, y, x), flow.at(n, 1, y, x));
                let taps = [
                    (cr.y0, cr.x0, (T::one() - cr.fy) * (T::one() - cr.fx)),
                    (cr.y0, cr.x0 + 1, (T::one() - cr.fy) * cr.fx),
                    (cr.y0 + 1, cr.x0, cr.fy * (T::one() - cr.fx)),
                    (cr.y0 + 1, cr.x0 + 1, cr.fy * cr.fx),
                ];
                for c in 0..s.c() {
                    let mut acc = T::zero();
                    for &(ty, tx, wt) in &taps {
                        if ty >= 0 && ty < h && tx >= 0 && tx < w {
                            acc = acc + wt * image.at(n, c, ty as usize, tx as usize);
                        }
                    }
                    out.set(n, c, y, x, acc);
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn warp_backward<T: Scalar>(image: &Tensor<T>, flow: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = image.shape();
    let (h, w) = (s.h() as isize, s.w() as isize);
    let mut gi = Tensor::zeros(s);
    let mut gf = Tensor::zeros(flow.shape());
    let one = T::one();
    for n in 0..s.n() {
        for y in 0..s.h() {
            for x in 0..s.w() {
                let cr = corners(y, x, flow.at(n, 0, y, x), flow.at(n, 1, y, x));
                // (dy, dx, weight, d weight / d sx, d weight / d sy)
                let taps = [
                    (0, 0, (one - cr.fy) * (one - cr.fx), -(one - cr.fy), -(one - cr.fx)),
                    (0, 1, (one - cr.fy) * cr.fx, one - cr.fy, -cr.fx),
                    (1, 0, cr.fy * (one - cr.fx), -cr.fy, one - cr.fx),
                    (1, 1, cr.fy * cr.fx, cr.fy, cr.fx),
                ];
                let (mut du, mut dv) = (T::zero(), T::zero());
                for c in 0..s.c() {
                    let gv = g.at(n, c, y, x);
                    for &(oy, ox, wt, dwx, dwy) in &taps {
                        let (ty, tx) = (cr.y0 + oy, cr.x0 + ox);
                        if ty >= 0 && ty < h && tx >= 0 && tx < w {
                            let (ty, tx) = (ty as usize, tx as usize);
                            let iv = image.at(n, c, ty, tx);
                            let i = s.index(n, c, ty, tx);
                            gi.data_mut()[i] = gi.data_mut()[i] + gv * wt;
                            du = du + gv * iv * dwx;
                            dv = dv + gv * iv * dwy;
                        }
                    }
                }
                gf.set(n, 0, y, x, du);
                gf.set(n, 1, y, x, dv);
            }
        }
    }
    (gi, gf)
}

fn check_mask(x: Shape, mask: &Tensor<impl Scalar>) -> Result<()> {
    const OP: &str = "pixel_norm_sum";
    let m = mask.shape();
    check_dim(OP, "mask channels", 1, m.c())?;
    check_dim(OP, "mask batch", x.n(), m.n())?;
    check_dim(OP, "mask height", x.h(), m.h())?;
    check_dim(OP, "mask width", x.w(), m.w())
}

/// `sum over (n, i, j) of mask * sqrt(sum over channels of x^2 + eps)`.
pub fn pixel_norm_sum<T: Scalar>(x: &Tensor<T>, mask: Option<&Tensor<T>>, eps: T) -> Result<T> {
    let s = x.shape();
    if let Some(m) = mask {
        check_mask(s, m)?;
    }
    let mut total = T::zero();
    for n in 0..s.n() {
        for p in 0..s.plane() {
            let m = mask.map_or(T::one(), |m| m.data()[n * s.plane() + p]);
            if m == T::zero() {
                continue;
            }
            let sq = (0..s.c()).fold(T::zero(), |acc, c| {
                let v = x.data()[(n * s.c() + c) * s.plane() + p];
                acc + v * v
            });
            total = total + m * (sq + eps).sqrt();
        }
    }
    Ok(total)
}

pub(crate) fn pixel_norm_sum_backward<T: Scalar>(x: &Tensor<T>, mask: Option<&Tensor<T>>, eps: T, g: T) -> Tensor<T> {
    let s = x.shape();
    let mut gx = Tensor::zeros(s);
    for n in 0..s.n() {
        for p in 0..s.plane() {
            let m = mask.map_or(T::one(), |m| m.data()[n * s.plane() + p]);
            if m == T::zero() {
                continue;
            }
            let idx = |c: usize| (n * s.c() + c) * s.plane() + p;
            let sq = (0..s.c()).fold(T::zero(), |acc, c| acc + x.data()[idx(c)] * x.data()[idx(c)]);
            let scale = g * m / (sq + eps).sqrt();
            for c in 0..s.c() {
                gx.data_mut()[idx(c)] = scale * x.data()[idx(c)];
            }
        }
    }
    gx
}

/// Handles to the pieces of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub supervised: Var,
    /// Present only when the balance weight is positive.
    pub reconstruction: Option<Var>,
}

impl<T: Scalar> Tape<T> {
    pub fn correlation(&mut self, a: Var, b: Var, max_disp: usize, patch: usize) -> Result<Var> {
        let y = correlation(self.value(a), self.value(b), max_disp, patch)?;
        self.push("correlation", y, Op::Correlation { a, b, max_disp, patch }, &[a, b])
    }

    pub fn bilinear_warp(&mut self, image: Var, flow: Var) -> Result<Var> {
        let y = bilinear_warp(self.value(image), self.value(flow))?;
        self.push("bilinear_warp", y, Op::Warp { image, flow }, &[image, flow])
    }

    pub fn pixel_norm_sum(&mut self, x: Var, mask: Option<Tensor<T>>, eps: T) -> Result<Var> {
        let total = pixel_norm_sum(self.value(x), mask.as_ref(), eps)?;
        self.push("pixel_norm_sum", Tensor::scalar(total), Op::PixelNormSum { x, mask, eps }, &[x])
    }

    /// Summed endpoint error over (masked) pixels.
    pub fn epe_loss(&mut self, pred: Var, gt: Var, mask: Option<Tensor<T>>) -> Result<Var> {
        let diff = self.sub(pred, gt)?;
        self.pixel_norm_sum(diff, mask, T::of(NORM_EPS))
    }

    /// Brightness-constancy loss on feature maps: warps `feat_b` by `flow` and
    /// sums the per-pixel channel norm of the residual against `feat_a`.
    pub fn reconstruction_loss(&mut self, feat_a: Var, feat_b: Var, flow: Var) -> Result<Var> {
        let (fs, ws) = (self.shape(feat_a), self.shape(flow));
        if fs.h() != ws.h() || fs.w() != ws.w() {
            return Err(TensorError::Invalid {
                op: "reconstruction_loss",
                msg: format!(
                    "flow resolution {}x{} differs from feature resolution {}x{}",
                    ws.h(),
                    ws.w(),
                    fs.h(),
                    fs.w()
                ),
            });
        }
        let warped = self.bilinear_warp(feat_b, flow)?;
        let diff = self.sub(feat_a, warped)?;
        self.pixel_norm_sum(diff, None, T::of(NORM_EPS))
    }

    /// `epe_loss + lambda * reconstruction_loss`. With `lambda == 0` the
    /// reconstruction term is not built and the total is the supervised loss.
    pub fn total_loss(
        &mut self,
        pred: Var,
        gt: Var,
        mask: Option<Tensor<T>>,
        feat_a: Var,
        feat_b: Var,
        lambda: f64,
    ) -> Result<LossTerms> {
        if !(lambda >= 0.0) {
            return Err(TensorError::Invalid {
                op: "total_loss",
                msg: format!("balance weight must be non-negative, got {lambda}"),
            });
        }
        let supervised = self.epe_loss(pred, gt, mask)?;
        if lambda == 0.0 {
            return Ok(LossTerms {
                total: supervised,
                supervised,
                reconstruction: None,
            });
        }
        let rec = self.reconstruction_loss(feat_a, feat_b, pred)?;
        let weighted = self.scale(rec, T::of(lambda))?;
        let total = self.add(supervised, weighted)?;
        Ok(LossTerms {
            total,
            supervised,
            reconstruction: Some(rec),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Nested-loop correlation with explicit bounds checks on every sample.
    fn correlation_oracle(a: &Tensor<f64>, b: &Tensor<f64>, d: usize, k: usize) -> Tensor<f64> {
        let s = a.shape();
        let (h, w) = (s.h() as isize, s.w() as isize);
        let side = 2 * d + 1;
        let norm = (s.c() * (2 * k + 1) * (2 * k + 1)) as f64;
        Tensor::from_fn(Shape::new(s.n(), side * side, s.h(), s.w()), |n, c, i, j| {
            let dy = (c / side) as isize - d as isize;
            let dx = (c % side) as isize - d as isize;
            let mut acc = 0.0;
            for oy in -(k as isize)..=k as isize {
                for ox in -(k as isize)..=k as isize {
                    let (ay, ax) = (i as isize + oy, j as isize + ox);
                    let (by, bx) = (ay + dy, ax + dx);
                    if ay < 0 || ax < 0 || ay >= h || ax >= w || by < 0 || bx < 0 || by >= h || bx >= w {
                        continue;
                    }
                    for ch in 0..s.c() {
                        acc += a.at(n, ch, ay as usize, ax as usize) * b.at(n, ch, by as usize, bx as usize);
                    }
                }
            }
            acc / norm
        })
    }

    /// Direct per-pixel bilinear interpolation with explicit corner clipping.
    fn warp_oracle(img: &Tensor<f64>, flow: &Tensor<f64>) -> Tensor<f64> {
        let s = img.shape();
        Tensor::from_fn(s, |n, c, y, x| {
            let sx = x as f64 + flow.at(n, 0, y, x);
            let sy = y as f64 + flow.at(n, 1, y, x);
            let mut acc = 0.0;
            for m in 0..s.h() {
                for q in 0..s.w() {
                    let wy = (1.0 - (sy - m as f64).abs()).max(0.0);
                    let wx = (1.0 - (sx - q as f64).abs()).max(0.0);
                    acc += img.at(n, c, m, q) * wy * wx;
                }
            }
            acc
        })
    }

    #[test]
    fn displacement_index_round_trip() {
        for c in 0..volume_channels(3) {
            let (dy, dx) = channel_displacement(c, 3);
            assert_eq!(displacement_channel(dy, dx, 3), c);
        }
        assert_eq!(channel_displacement(3 * 7 + 3, 3), (0, 0));
    }

    #[test]
    fn correlation_constant_field() {
        let a = Tensor::<f64>::ones(Shape::new(1, 1, 5, 5));
        let m = correlation(&a, &a, 1, 0).unwrap();
        for c in 0..9 {
            assert_eq!(m.at(0, c, 2, 2), 1.0);
        }
    }

    #[test]
    fn correlation_finds_pure_translation() {
        let mut r = rng(11);
        let raw = Tensor::<f64>::uniform(Shape::new(1, 4, 8, 8), -1.0, 1.0, &mut r);
        // Unit-length feature vectors make the matching displacement the unique maximum.
        let a = Tensor::from_fn(raw.shape(), |n, c, y, x| {
            let len = (0..4).map(|k| raw.at(n, k, y, x).powi(2)).sum::<f64>().sqrt();
            raw.at(n, c, y, x) / len
        });
        // b(x) = a(x - 1): content moved one pixel right.
        let b = Tensor::from_fn(a.shape(), |n, c, y, x| if x == 0 { 0.0 } else { a.at(n, c, y, x - 1) });
        let m = correlation(&a, &b, 1, 0).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                let best = (0..9)
                    .max_by(|&p, &q| m.at(0, p, y, x).partial_cmp(&m.at(0, q, y, x)).unwrap())
                    .unwrap();
                assert_eq!(channel_displacement(best, 1), (0, 1), "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn correlation_matches_oracle_with_patch() {
        let mut r = rng(12);
        let a = Tensor::<f64>::uniform(Shape::new(2, 3, 7, 6), -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::uniform(Shape::new(2, 3, 7, 6), -1.0, 1.0, &mut r);
        let got = correlation(&a, &b, 2, 1).unwrap();
        let expect = correlation_oracle(&a, &b, 2, 1);
        for (g, e) in got.data().iter().zip(expect.data()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_is_antisymmetric_in_displacement() {
        let mut r = rng(13);
        let d = 2;
        let a = Tensor::<f64>::uniform(Shape::new(1, 3, 6, 6), -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::uniform(Shape::new(1, 3, 6, 6), -1.0, 1.0, &mut r);
        let ab = correlation(&a, &b, d, 0).unwrap();
        let ba = correlation(&b, &a, d, 0).unwrap();
        for c in 0..volume_channels(d) {
            let (dy, dx) = channel_displacement(c, d);
            for i in 0..6isize {
                for j in 0..6isize {
                    let (pi, pj) = (i + dy, j + dx);
                    if !(0..6).contains(&pi) || !(0..6).contains(&pj) {
                        continue;
                    }
                    let lhs = ab.at(0, c, i as usize, j as usize);
                    let rhs = ba.at(0, displacement_channel(-dy, -dx, d), pi as usize, pj as usize);
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn correlation_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        assert!(correlation(&a, &b, 1, 0).is_err());
    }

    #[test]
    fn zero_flow_warp_is_bit_exact() {
        let mut r = rng(14);
        let img = Tensor::<f32>::uniform(Shape::new(2, 3, 9, 7), -1.0, 1.0, &mut r);
        let flow = Tensor::zeros(Shape::new(2, 2, 9, 7));
        assert_eq!(bilinear_warp(&img, &flow).unwrap(), img);
    }

    #[test]
    fn integer_flow_shifts_columns() {
        let mut r = rng(15);
        let img = Tensor::<f64>::uniform(Shape::new(1, 2, 5, 8), -1.0, 1.0, &mut r);
        let flow = Tensor::from_fn(Shape::new(1, 2, 5, 8), |_, c, _, _| if c == 0 { 2.0 } else { 0.0 });
        let out = bilinear_warp(&img, &flow).unwrap();
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..8 {
                    let expect = if x + 2 < 8 { img.at(0, c, y, x + 2) } else { 0.0 };
                    assert_eq!(out.at(0, c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn warp_matches_interpolation_oracle() {
        let mut r = rng(16);
        let img = Tensor::<f64>::uniform(Shape::new(1, 2, 6, 7), -1.0, 1.0, &mut r);
        let flow = Tensor::<f64>::uniform(Shape::new(1, 2, 6, 7), -0.99, 0.99, &mut r);
        let got = bilinear_warp(&img, &flow).unwrap();
        let expect = warp_oracle(&img, &flow);
        for (g, e) in got.data().iter().zip(expect.data()) {
            assert!((g - e).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_rejects_size_mismatch() {
        let img = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let flow = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 5));
        assert!(bilinear_warp(&img, &flow).is_err());
    }

    #[test]
    fn epe_loss_closed_forms() {
        let s = Shape::new(1, 2, 64, 64);
        let mut r = rng(17);
        let gt = Tensor::<f64>::uniform(s, -3.0, 3.0, &mut r);
        let offset = Tensor::from_fn(s, |n, c, y, x| gt.at(n, c, y, x) + if c == 0 { 3.0 } else { 4.0 });
        let mut tape = Tape::new();
        let (g, p, q) = (tape.constant(gt.clone()), tape.constant(gt.clone()), tape.constant(offset));
        let same = tape.epe_loss(p, g, None).unwrap();
        let shifted = tape.epe_loss(q, g, None).unwrap();
        let floor = 64.0 * 64.0 * NORM_EPS.sqrt();
        assert!((tape.value(same).data()[0] - floor).abs() < 1e-9);
        assert!((tape.value(shifted).data()[0] - 5.0 * 64.0 * 64.0).abs() < 1e-2);
    }

    #[test]
    fn epe_loss_matches_summation_oracle_with_mask() {
        let s = Shape::new(2, 2, 5, 6);
        let mut r = rng(18);
        let pred = Tensor::<f64>::uniform(s, -2.0, 2.0, &mut r);
        let gt = Tensor::<f64>::uniform(s, -2.0, 2.0, &mut r);
        let mask = Tensor::from_fn(Shape::new(2, 1, 5, 6), |_, _, y, x| ((x + y) % 3 != 0) as u8 as f64);
        let mut expect = 0.0;
        for n in 0..2 {
            for y in 0..5 {
                for x in 0..6 {
                    let du = pred.at(n, 0, y, x) - gt.at(n, 0, y, x);
                    let dv = pred.at(n, 1, y, x) - gt.at(n, 1, y, x);
                    expect += mask.at(n, 0, y, x) * (du * du + dv * dv + NORM_EPS).sqrt();
                }
            }
        }
        let mut tape = Tape::new();
        let (p, g) = (tape.constant(pred), tape.constant(gt));
        let l = tape.epe_loss(p, g, Some(mask)).unwrap();
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-4);
    }

    #[test]
    fn reconstruction_loss_vanishes_on_aligned_features() {
        let mut r = rng(19);
        let s = Shape::new(1, 3, 8, 8);
        let fa = Tensor::<f64>::uniform(s, -1.0, 1.0, &mut r);
        // b(x) = a(x - 1) so warping b by u = +1 recovers a away from the right edge.
        let fb = Tensor::from_fn(s, |n, c, y, x| if x == 0 { 0.0 } else { fa.at(n, c, y, x - 1) });
        let zero = Tensor::zeros(Shape::new(1, 2, 8, 8));
        let unit = Tensor::from_fn(Shape::new(1, 2, 8, 8), |_, c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let (a, b, same) = (tape.constant(fa.clone()), tape.constant(fb), tape.constant(fa));
        let (z, u) = (tape.constant(zero), tape.constant(unit));
        let l_same = tape.reconstruction_loss(a, same, z).unwrap();
        assert!(tape.value(l_same).data()[0] <= NORM_EPS.sqrt() * 64.0 + 1e-12);
        let warped = tape.bilinear_warp(b, u).unwrap();
        let wv = tape.value(warped).clone();
        let av = tape.value(a).clone();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..7 {
                    assert_eq!(wv.at(0, c, y, x), av.at(0, c, y, x));
                }
            }
        }
    }

    #[test]
    fn reconstruction_loss_rejects_resolution_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        let f = tape.constant(Tensor::zeros(Shape::new(1, 2, 16, 16)));
        assert!(tape.reconstruction_loss(a, a, f).is_err());
    }

    #[test]
    fn total_loss_combines_terms() {
        let mut r = rng(20);
        let pred = Tensor::<f64>::uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, &mut r);
        let gt = Tensor::<f64>::uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, &mut r);
        let fa = Tensor::<f64>::uniform(Shape::new(1, 4, 6, 6), -1.0, 1.0, &mut r);
        let fb = Tensor::<f64>::uniform(Shape::new(1, 4, 6, 6), -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let (p, g, a, b) = (tape.constant(pred), tape.constant(gt), tape.constant(fa), tape.constant(fb));
        let plain = tape.epe_loss(p, g, None).unwrap();
        let zero = tape.total_loss(p, g, None, a, b, 0.0).unwrap();
        assert_eq!(tape.value(zero.total), tape.value(plain));
        let mixed = tape.total_loss(p, g, None, a, b, DEFAULT_LAMBDA).unwrap();
        let s = tape.value(mixed.supervised).data()[0];
        let rec = tape.value(mixed.reconstruction.unwrap()).data()[0];
        assert!((tape.value(mixed.total).data()[0] - (s + 0.005 * rec)).abs() < 1e-6);
        assert!(tape.total_loss(p, g, None, a, b, -1.0).is_err());
    }

    #[test]
    fn warp_gradient_wrt_flow() {
        let mut r = rng(21);
        let img = Tensor::<f64>::uniform(Shape::new(1, 2, 5, 5), -1.0, 1.0, &mut r);
        let flow = Tensor::<f64>::uniform(Shape::new(1, 2, 5, 5), -0.8, 0.8, &mut r);
        let rep = gradient_check(
            |t, f| {
                let i = t.constant(img.clone());
                let w = t.bilinear_warp(i, f)?;
                let sq = t.mul(w, w)?;
                t.sum(sq)
            },
            &flow,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
