//! Property tests over the codecs and flow operators.

use std::path::Path;

use proptest::prelude::*;

use crate::data::{decode_flo, decode_ppm, encode_flo, encode_ppm};
use crate::flow_ops::{bilinear_warp, correlation, displacement_channel};
use crate::tensor::{Shape, Tensor};

fn tensor(shape: Shape, values: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(shape, |n, c, y, x| values[shape.index(n, c, y, x) % values.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flo_round_trip_is_bit_exact(
        h in 1usize..12,
        w in 1usize..12,
        values in prop::collection::vec(-1e6f32..1e6, 1..64),
    ) {
        let flow = Tensor::from_fn(Shape::new(1, 2, h, w), |_, c, y, x| values[(c * h * w + y * w + x) % values.len()]);
        let bytes = encode_flo(&flow).unwrap();
        prop_assert_eq!(bytes.len(), 12 + 8 * h * w);
        let back = decode_flo(&bytes, Path::new("p.flo")).unwrap();
        prop_assert!(back.data().iter().zip(flow.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn ppm_bytes_survive_decode_encode(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut raw = format!("P6\n{w} {h}\n255\n").into_bytes();
        raw.extend((0..3 * h * w).map(|i| (seed.rotate_left(i as u32 % 64) as u8) ^ (i as u8)));
        let image = decode_ppm(&raw, Path::new("p.ppm")).unwrap();
        prop_assert_eq!(encode_ppm(&image).unwrap(), raw);
    }

    #[test]
    fn warp_is_linear_in_the_image(
        a in prop::collection::vec(-1.0f64..1.0, 8..40),
        b in prop::collection::vec(-1.0f64..1.0, 8..40),
        f in prop::collection::vec(-3.0f64..3.0, 4..20),
        alpha in -2.0f64..2.0,
    ) {
        let s = Shape::new(1, 2, 5, 6);
        let (ia, ib) = (tensor(s, &a), tensor(s, &b));
        let flow = tensor(s, &f);
        let mut mix = ia.map(|v| alpha * v);
        mix.add_assign(&ib);
        let lhs = bilinear_warp(&mix, &flow).unwrap();
        let mut rhs = bilinear_warp(&ia, &flow).unwrap().map(|v| alpha * v);
        rhs.add_assign(&bilinear_warp(&ib, &flow).unwrap());
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_swaps_with_negated_displacement(
        a in prop::collection::vec(-1.0f64..1.0, 8..60),
        b in prop::collection::vec(-1.0f64..1.0, 8..60),
        d in 0usize..3,
        k in 0usize..2,
    ) {
        let s = Shape::new(1, 3, 6, 7);
        let (ta, tb) = (tensor(s, &a), tensor(s, &b));
        let ab = correlation(&ta, &tb, d, k).unwrap();
        let ba = correlation(&tb, &ta, d, k).unwrap();
        let di = d as isize;
        for dy in -di..=di {
            for dx in -di..=di {
                let (c, cn) = (displacement_channel(dy, dx, d), displacement_channel(-dy, -dx, d));
                for y in 0..6isize {
                    for x in 0..7isize {
                        let (yy, xx) = (y + dy, x + dx);
                        if !(0..6).contains(&yy) || !(0..7).contains(&xx) {
                            continue;
                        }
                        let l = ab.at(0, c, y as usize, x as usize);
                        let r = ba.at(0, cn, yy as usize, xx as usize);
                        prop_assert!((l - r).abs() < 1e-12, "({dy},{dx}) at ({y},{x}): {l} vs {r}");
                    }
                }
            }
        }
    }
}
