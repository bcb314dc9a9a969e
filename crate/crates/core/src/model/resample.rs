use crate::tensor::{Scalar, Shape, Tensor};

/// Bilinear upsampling of a low-resolution flow by an integer factor, with
/// vectors rescaled into high-resolution pixels. Sample positions use
/// half-pixel centres and clamp at the borders.
pub fn upsample_flow<T: Scalar>(flow: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = flow.shape();
    let (h, w) = (s.h(), s.w());
    let f = factor as f64;
    let axis = |out: usize, len: usize| {
        let pos = ((out as f64 + 0.5) / f - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let xs: Vec<_> = (0..w * factor).map(|x| axis(x, w)).collect();
    let ys: Vec<_> = (0..h * factor).map(|y| axis(y, h)).collect();
    Tensor::from_fn(Shape::new(s.n(), s.c(), h * factor, w * factor), |n, c, y, x| {
        let (y0, y1, ty) = ys[y];
        let (x0, x1, tx) = xs[x];
        let v = |yy, xx| flow.at(n, c, yy, xx).as_f64();
        let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
        let bottom = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
        T::of((top * (1.0 - ty) + bottom * ty) * f)
    })
}

/// Block-average of a full-resolution flow, with vectors divided by `factor`.
/// Sides must be divisible by `factor`.
pub fn downsample_flow<T: Scalar>(flow: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = flow.shape();
    let norm = (factor * factor * factor) as f64;
    Tensor::from_fn(Shape::new(s.n(), s.c(), s.h() / factor, s.w() / factor), |n, c, y, x| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += flow.at(n, c, y * factor + dy, x * factor + dx).as_f64();
            }
        }
        T::of(acc / norm)
    })
}

/// A low-resolution pixel is valid only when its whole block is valid.
pub fn downsample_mask<T: Scalar>(mask: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = mask.shape();
    Tensor::from_fn(Shape::new(s.n(), s.c(), s.h() / factor, s.w() / factor), |n, c, y, x| {
        let all = (0..factor).all(|dy| {
            (0..factor).all(|dx| mask.at(n, c, y * factor + dy, x * factor + dx) > T::zero())
        });
        if all {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_flow_survives_round_trip() {
        let flow = Tensor::<f64>::from_fn(Shape::new(1, 2, 3, 5), |_, c, _, _| if c == 0 { 1.5 } else { -0.25 });
        let up = upsample_flow(&flow, 4);
        assert_eq!(up.shape(), Shape::new(1, 2, 12, 20));
        assert!(up.data().iter().all(|&v| v == 6.0 || v == -1.0));
        assert_eq!(downsample_flow(&up, 4), flow);
    }

    #[test]
    fn upsampling_interpolates_between_centres() {
        let flow = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let up = upsample_flow(&flow, 2);
        // Centres of the four output pixels sit at -0.25, 0.25, 0.75, 1.25 in input units.
        assert_eq!(up.data(), &[0.0, 0.5, 1.5, 2.0, 0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn mask_requires_full_block() {
        let mut m = Tensor::<f32>::ones(Shape::new(1, 1, 4, 4));
        m.set(0, 0, 3, 0, 0.0);
        assert_eq!(downsample_mask(&m, 2).data(), &[1.0, 1.0, 0.0, 1.0]);
    }
}
