use crate::tensor::{Shape, Tensor};

/// HSV with hue in degrees `[0, 360)` and `s`, `v` in `[0, 1]` to RGB.
pub fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Colour-codes a `(1, 2, H, W)` flow: hue follows the direction
/// `atan2(v, u)`, saturation grows with magnitude up to `max_magnitude`, and
/// value is 1. Without an explicit maximum the 99th-percentile magnitude is used.
pub fn flow_to_color(flow: &Tensor<f32>, max_magnitude: Option<f64>) -> Tensor<f32> {
    let s = flow.shape();
    let mags: Vec<f64> = (0..s.h())
        .flat_map(|y| (0..s.w()).map(move |x| (y, x)))
        .map(|(y, x)| (flow.at(0, 0, y, x) as f64).hypot(flow.at(0, 1, y, x) as f64))
        .collect();
    let max = max_magnitude.unwrap_or_else(|| {
        let mut sorted = mags.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        sorted[rank - 1]
    });
    let mut out = Tensor::zeros(Shape::new(1, 3, s.h(), s.w()));
    for y in 0..s.h() {
        for x in 0..s.w() {
            let (u, v) = (flow.at(0, 0, y, x) as f64, flow.at(0, 1, y, x) as f64);
            let m = mags[y * s.w() + x];
            let sat = if max > 0.0 { (m / max).min(1.0) } else { 0.0 };
            let rgb = hsv_to_rgb(v.atan2(u).to_degrees(), sat, 1.0);
            for (c, val) in rgb.into_iter().enumerate() {
                out.set(0, c, y, x, val as f32);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&Tensor::zeros(Shape::new(1, 2, 4, 5)), None);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn opposite_directions_have_complementary_hues() {
        let flow = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![3.0, -3.0, 0.0, 0.0]).unwrap();
        let img = flow_to_color(&flow, Some(3.0));
        // (3, 0) is hue 0 (red); (-3, 0) is hue 180 (cyan).
        let px = |x| [0, 1, 2].map(|c| img.at(0, c, 0, x));
        assert_eq!(px(0), [1.0, 0.0, 0.0]);
        assert_eq!(px(1), [0.0, 1.0, 1.0]);
    }

    #[test]
    fn fixed_field_matches_hand_table() {
        // Row-major (u, v) for a 3x3 field and the expected RGB at max magnitude 1.
        let vectors = [
            (1.0, 0.0),
            (0.0, 1.0),
            (-1.0, 0.0),
            (0.0, -1.0),
            (0.0, 0.0),
            (0.5, 0.0),
            (0.6, 0.8),
            (2.0, 0.0),
            (-0.5, -0.5 * 3f32.sqrt()),
        ];
        let expected: [[f64; 3]; 9] = [
            [1.0, 0.0, 0.0],
            [0.5, 1.0, 0.0],
            [0.0, 1.0, 1.0],
            [0.5, 0.0, 1.0],
            [1.0, 1.0, 1.0],
            [1.0, 0.5, 0.5],
            // hue 53.13°: x = 53.13 / 60 = 0.8855.
            [1.0, 0.885_49, 0.0],
            [1.0, 0.0, 0.0],
            // hue 240°.
            [0.0, 0.0, 1.0],
        ];
        let mut data = vec![0.0; 18];
        for (i, (u, v)) in vectors.iter().enumerate() {
            data[i] = *u;
            data[9 + i] = *v;
        }
        let flow = Tensor::from_vec(Shape::new(1, 2, 3, 3), data).unwrap();
        let img = flow_to_color(&flow, Some(1.0));
        for (i, rgb) in expected.iter().enumerate() {
            for c in 0..3 {
                let got = img.at(0, c, i / 3, i % 3) as f64;
                assert!((got - rgb[c]).abs() < 1e-4, "pixel {i} channel {c}: {got} vs {}", rgb[c]);
            }
        }
    }

    #[test]
    fn default_scale_is_99th_percentile() {
        let mut data = vec![0.0f32; 200];
        for (i, v) in data[..100].iter_mut().enumerate() {
            *v = (i + 1) as f32;
        }
        let flow = Tensor::from_vec(Shape::new(1, 2, 10, 10), data).unwrap();
        let img = flow_to_color(&flow, None);
        // Magnitude 99 is the 99th percentile, so 99 and 100 saturate and 49.5 is half.
        assert_eq!(img.at(0, 1, 9, 8), 0.0);
        assert_eq!(img.at(0, 1, 9, 9), 0.0);
        assert!((img.at(0, 1, 0, 0) - (1.0 - 1.0 / 99.0)).abs() < 1e-6);
    }
}
