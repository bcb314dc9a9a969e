use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mix64, DataError, SamplePair};
use crate::tensor::{Shape, Tensor};

/// `p ↦ A p + t` on pixel coordinates `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Affine {
    pub fn new(linear: [[f64; 2]; 2], translation: [f64; 2]) -> Result<Self, DataError> {
        let a = Affine {
            linear,
            translation,
        };
        if !(a.det().abs() > 1e-3) || !linear.iter().flatten().chain(&translation).all(|v| v.is_finite()) {
            return Err(DataError::Motion(format!("affine map {linear:?} is not invertible")));
        }
        Ok(a)
    }

    pub fn identity() -> Self {
        Affine {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            translation: [0.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine {
            translation: [tx, ty],
            ..Self::identity()
        }
    }

    /// Rotation by `degrees` (positive turns +x towards +y) followed by
    /// uniform scaling, both about `(cx, cy)`.
    pub fn similarity_about(degrees: f64, scale: f64, cx: f64, cy: f64) -> Result<Self, DataError> {
        if !(scale > 0.0) {
            return Err(DataError::Motion(format!("scale must be positive, got {scale}")));
        }
        let (s, c) = degrees.to_radians().sin_cos();
        let l = [[scale * c, -scale * s], [scale * s, scale * c]];
        let t = [cx - l[0][0] * cx - l[0][1] * cy, cy - l[1][0] * cx - l[1][1] * cy];
        Affine::new(l, t)
    }

    pub fn rotation_about(degrees: f64, cx: f64, cy: f64) -> Result<Self, DataError> {
        Self::similarity_about(degrees, 1.0, cx, cy)
    }

    pub fn det(&self) -> f64 {
        let l = self.linear;
        l[0][0] * l[1][1] - l[0][1] * l[1][0]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (l, t) = (self.linear, self.translation);
        (l[0][0] * x + l[0][1] * y + t[0], l[1][0] * x + l[1][1] * y + t[1])
    }

    pub fn apply_linear(&self, u: f64, v: f64) -> (f64, f64) {
        let l = self.linear;
        (l[0][0] * u + l[0][1] * v, l[1][0] * u + l[1][1] * v)
    }

    pub fn inverse(&self) -> Self {
        let l = self.linear;
        let d = self.det();
        let inv = [[l[1][1] / d, -l[0][1] / d], [-l[1][0] / d, l[0][0] / d]];
        let t = self.translation;
        Affine {
            linear: inv,
            translation: [
                -(inv[0][0] * t[0] + inv[0][1] * t[1]),
                -(inv[1][0] * t[0] + inv[1][1] * t[1]),
            ],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Largest displacement `|M p - p|` over a `height x width` frame. Attained
    /// at a corner since the displacement is affine in `p`.
    pub fn max_displacement(&self, height: usize, width: usize) -> f64 {
        let (xm, ym) = ((width - 1) as f64, (height - 1) as f64);
        [(0.0, 0.0), (xm, 0.0), (0.0, ym), (xm, ym)]
            .iter()
            .map(|&(x, y)| {
                let (qx, qy) = self.apply(x, y);
                (qx - x).hypot(qy - y)
            })
            .fold(0.0, f64::max)
    }
}

/// Ranges for randomly drawn per-layer motion. Every layer, background
/// included, gets its own similarity transform about the frame centre.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionBounds {
    /// Translation length bound in pixels.
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    /// Scale is drawn from `[1 - d, 1 + d]`.
    pub max_scale_delta: f64,
    pub min_foreground: usize,
    pub max_foreground: usize,
}

impl Default for MotionBounds {
    fn default() -> Self {
        MotionBounds {
            max_translation: 8.0,
            max_rotation_deg: 3.0,
            max_scale_delta: 0.03,
            min_foreground: 1,
            max_foreground: 3,
        }
    }
}

impl MotionBounds {
    /// Pure translations up to `max` pixels.
    pub fn translations(max: f64) -> Self {
        MotionBounds {
            max_translation: max,
            max_rotation_deg: 0.0,
            max_scale_delta: 0.0,
            ..Self::default()
        }
    }

    fn displacement_bound(&self, height: usize, width: usize) -> f64 {
        let radius = 0.5 * ((height - 1) as f64).hypot((width - 1) as f64);
        let s = 1.0 + self.max_scale_delta;
        let half = self.max_rotation_deg.to_radians() / 2.0;
        // |(sR - I) r| <= |s - 1| |r| + s |R - I| |r| and |R - I| = 2 sin(θ/2).
        (self.max_scale_delta + 2.0 * s * half.sin()) * radius + self.max_translation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MotionSpec {
    /// Every layer moves with one map; the flow is the map's displacement field.
    Global(Affine),
    Random(MotionBounds),
}

impl MotionSpec {
    pub fn identity() -> Self {
        MotionSpec::Global(Affine::identity())
    }

    fn validate(&self, height: usize, width: usize) -> Result<(), DataError> {
        let limit = height.min(width) as f64 / 2.0;
        let bound = match self {
            MotionSpec::Global(a) => a.max_displacement(height, width),
            MotionSpec::Random(b) => {
                if b.max_foreground < b.min_foreground {
                    return Err(DataError::Motion("max_foreground is below min_foreground".into()));
                }
                if !(b.max_translation >= 0.0 && b.max_rotation_deg >= 0.0) {
                    return Err(DataError::Motion("motion bounds must be non-negative".into()));
                }
                if !(b.max_scale_delta >= 0.0 && b.max_scale_delta < 1.0) {
                    return Err(DataError::Motion("max_scale_delta must lie in [0, 1)".into()));
                }
                b.displacement_bound(height, width)
            }
        };
        if !(bound < limit) {
            return Err(DataError::Motion(format!(
                "motion of up to {bound:.2} px exceeds the frame (limit {limit:.2} px for {height}x{width})"
            )));
        }
        Ok(())
    }
}

/// Seeded coloured value noise defined on the whole plane.
#[derive(Debug, Clone)]
struct Texture {
    seed: u64,
    base: [f64; 3],
    contrast: f64,
}

const OCTAVES: [(f64, f64); 3] = [(16.0, 0.5), (8.0, 0.3), (4.0, 0.2)];

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Texture {
            seed: rng.random(),
            base: [
                rng.random_range(0.25..0.75),
                rng.random_range(0.25..0.75),
                rng.random_range(0.25..0.75),
            ],
            contrast: rng.random_range(0.3..0.5),
        }
    }

    fn lattice(&self, octave: usize, c: usize, ix: i64, iy: i64) -> f64 {
        let key = mix64(self.seed ^ mix64((octave * 3 + c) as u64 ^ mix64(ix as u64 ^ mix64(iy as u64))));
        (key >> 11) as f64 / (1u64 << 53) as f64
    }

    fn noise(&self, c: usize, x: f64, y: f64) -> f64 {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        OCTAVES
            .iter()
            .enumerate()
            .map(|(o, &(cell, weight))| {
                let (gx, gy) = (x / cell, y / cell);
                let (fx, fy) = (gx.floor(), gy.floor());
                let (ix, iy) = (fx as i64, fy as i64);
                let (tx, ty) = (smooth(gx - fx), smooth(gy - fy));
                let v = |dx, dy| self.lattice(o, c, ix + dx, iy + dy);
                let top = v(0, 0) + (v(1, 0) - v(0, 0)) * tx;
                let bottom = v(0, 1) + (v(1, 1) - v(0, 1)) * tx;
                weight * (top + (bottom - top) * ty)
            })
            .sum()
    }

    fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        self.base[c] + self.contrast * (self.noise(c, x, y) - 0.5)
    }
}

#[derive(Debug, Clone)]
enum Shape2d {
    Everywhere,
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { cx: f64, cy: f64, hx: f64, hy: f64, angle: f64 },
}

impl Shape2d {
    fn random(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Self {
        let side = height.min(width) as f64;
        let cx = rng.random_range(0.2..0.8) * width as f64;
        let cy = rng.random_range(0.2..0.8) * height as f64;
        let a = rng.random_range(0.12..0.3) * side;
        let b = rng.random_range(0.12..0.3) * side;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        if rng.random_bool(0.5) {
            Shape2d::Ellipse { cx, cy, rx: a, ry: b, angle }
        } else {
            Shape2d::Rect { cx, cy, hx: a, hy: b, angle }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let local = |cx: f64, cy: f64, angle: f64| {
            let (s, c) = angle.sin_cos();
            let (dx, dy) = (x - cx, y - cy);
            (c * dx + s * dy, -s * dx + c * dy)
        };
        match *self {
            Shape2d::Everywhere => true,
            Shape2d::Ellipse { cx, cy, rx, ry, angle } => {
                let (u, v) = local(cx, cy, angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape2d::Rect { cx, cy, hx, hy, angle } => {
                let (u, v) = local(cx, cy, angle);
                u.abs() <= hx && v.abs() <= hy
            }
        }
    }
}

/// A textured region that sits in frame A as drawn and moves to frame B by `motion`.
#[derive(Debug, Clone)]
struct Layer {
    shape: Shape2d,
    texture: Texture,
    motion: Affine,
    inverse: Affine,
}

impl Layer {
    /// Whether this layer covers `(x, y)` in frame A.
    fn covers_a(&self, x: f64, y: f64) -> bool {
        self.shape.contains(x, y)
    }

    /// Layer-local coordinates of point `(x, y)` of frame B.
    fn source_of_b(&self, x: f64, y: f64) -> (f64, f64) {
        self.inverse.apply(x, y)
    }
}

fn random_similarity(rng: &mut ChaCha8Rng, b: &MotionBounds, height: usize, width: usize) -> Affine {
    let draw = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let rot = draw(rng, b.max_rotation_deg);
    let scale = 1.0 + draw(rng, b.max_scale_delta);
    let (len, dir) = if b.max_translation > 0.0 {
        // Uniform on the disc of radius max_translation.
        (
            b.max_translation * rng.random_range(0.0f64..=1.0).sqrt(),
            rng.random_range(0.0..std::f64::consts::TAU),
        )
    } else {
        (0.0, 0.0)
    };
    let (cx, cy) = ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
    let mut a = Affine::similarity_about(rot, scale, cx, cy).expect("scale bounded away from zero");
    a.translation[0] += len * dir.cos();
    a.translation[1] += len * dir.sin();
    a
}

/// A generated pair with its occlusion diagnostics.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub pair: SamplePair,
    /// `(1, 1, H, W)`: 1 where the pixel of A is hidden in B or leaves the frame.
    pub occlusion: Tensor<f32>,
}

impl SyntheticPair {
    /// Complement of `occlusion`.
    pub fn visible_mask(&self) -> Tensor<f32> {
        self.occlusion.map(|o| 1.0 - o)
    }
}

/// Renders a textured background and foreground shapes, moves every layer by
/// its affine map and derives the flow analytically. Foreground layers occlude
/// the background and earlier foregrounds; the flow of an occluded pixel is
/// still the flow of the layer visible in A.
pub fn generate_synthetic_pair(
    seed: u64,
    height: usize,
    width: usize,
    motion: &MotionSpec,
) -> Result<SyntheticPair, DataError> {
    if height < 32 || width < 32 {
        return Err(DataError::Sample(format!("frame {height}x{width} is below the 32x32 minimum")));
    }
    motion.validate(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let foreground = match motion {
        MotionSpec::Global(_) => rng.random_range(1..=3),
        MotionSpec::Random(b) => rng.random_range(b.min_foreground..=b.max_foreground),
    };
    let mut layers = Vec::with_capacity(foreground + 1);
    for i in 0..=foreground {
        let shape = if i == 0 {
            Shape2d::Everywhere
        } else {
            Shape2d::random(&mut rng, height, width)
        };
        let texture = Texture::random(&mut rng);
        let motion = match motion {
            MotionSpec::Global(a) => *a,
            MotionSpec::Random(b) => random_similarity(&mut rng, b, height, width),
        };
        layers.push(Layer {
            shape,
            texture,
            inverse: motion.inverse(),
            motion,
        });
    }

    let top_a = |x: f64, y: f64| layers.iter().rposition(|l| l.covers_a(x, y)).expect("background covers all");
    let top_b = |x: f64, y: f64| {
        layers
            .iter()
            .rposition(|l| {
                let (sx, sy) = l.source_of_b(x, y);
                l.covers_a(sx, sy)
            })
            .expect("background covers all")
    };

    let plane = Shape::new(1, 1, height, width);
    let mut a = Tensor::zeros(Shape::new(1, 3, height, width));
    let mut b = Tensor::zeros(Shape::new(1, 3, height, width));
    let mut flow = Tensor::zeros(Shape::new(1, 2, height, width));
    let mut occlusion = Tensor::zeros(plane);
    let (xmax, ymax) = ((width - 1) as f64, (height - 1) as f64);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64, y as f64);
            let la = top_a(px, py);
            let layer = &layers[la];
            for c in 0..3 {
                a.set(0, c, y, x, layer.texture.sample(c, px, py) as f32);
            }
            let (qx, qy) = layer.motion.apply(px, py);
            flow.set(0, 0, y, x, (qx - px) as f32);
            flow.set(0, 1, y, x, (qy - py) as f32);
            let inside = (0.0..=xmax).contains(&qx) && (0.0..=ymax).contains(&qy);
            if !inside || top_b(qx, qy) != la {
                occlusion.set(0, 0, y, x, 1.0);
            }

            let lb = top_b(px, py);
            let (sx, sy) = layers[lb].source_of_b(px, py);
            for c in 0..3 {
                b.set(0, c, y, x, layers[lb].texture.sample(c, sx, sy) as f32);
            }
        }
    }
    Ok(SyntheticPair {
        pair: SamplePair::new(a, b, flow, None)?,
        occlusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn warp_error(sp: &SyntheticPair) -> f64 {
        let p = &sp.pair;
        let mut tape = Tape::<f32>::new();
        let b = tape.constant(p.image_b.clone());
        let f = tape.constant(p.flow.clone());
        let w = tape.bilinear_warp(b, f).unwrap();
        let warped = tape.value(w);
        let visible = sp.visible_mask();
        let (mut err, mut n) = (0.0, 0.0);
        for y in 0..p.height() {
            for x in 0..p.width() {
                if visible.at(0, 0, y, x) > 0.0 {
                    for c in 0..3 {
                        err += (p.image_a.at(0, c, y, x) - warped.at(0, c, y, x)).abs() as f64;
                        n += 1.0;
                    }
                }
            }
        }
        err / n
    }

    #[test]
    fn identity_motion_gives_equal_frames() {
        let sp = generate_synthetic_pair(3, 32, 48, &MotionSpec::identity()).unwrap();
        assert_eq!(sp.pair.image_a, sp.pair.image_b);
        assert_eq!(sp.pair.flow.max_abs(), 0.0);
        assert_eq!(sp.occlusion.max_abs(), 0.0);
    }

    #[test]
    fn global_translation() {
        let sp = generate_synthetic_pair(4, 40, 40, &MotionSpec::Global(Affine::translation(5.0, 0.0))).unwrap();
        let p = &sp.pair;
        for y in 0..40 {
            for x in 0..40 {
                assert_eq!((p.flow.at(0, 0, y, x), p.flow.at(0, 1, y, x)), (5.0, 0.0));
                if x + 5 < 40 {
                    for c in 0..3 {
                        assert_eq!(p.image_a.at(0, c, y, x), p.image_b.at(0, c, y, x + 5));
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_flow_matches_closed_form() {
        let (h, w) = (48, 64);
        let (cx, cy) = (31.5, 23.5);
        let rot = Affine::rotation_about(10.0, cx, cy).unwrap();
        let sp = generate_synthetic_pair(5, h, w, &MotionSpec::Global(rot)).unwrap();
        let (s, c) = 10f64.to_radians().sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let u = (c - 1.0) * dx - s * dy;
                let v = s * dx + (c - 1.0) * dy;
                assert!((sp.pair.flow.at(0, 0, y, x) as f64 - u).abs() < 1e-4);
                assert!((sp.pair.flow.at(0, 1, y, x) as f64 - v).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn warping_b_reconstructs_a() {
        for seed in 0..4 {
            let sp = generate_synthetic_pair(seed, 64, 64, &MotionSpec::Random(MotionBounds::default())).unwrap();
            let e = warp_error(&sp);
            assert!(e < 0.02, "seed {seed}: mean error {e}");
            assert!(sp.occlusion.sum() < 0.5 * 64.0 * 64.0);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = MotionSpec::Random(MotionBounds::default());
        let a = generate_synthetic_pair(9, 32, 32, &spec).unwrap();
        let b = generate_synthetic_pair(9, 32, 32, &spec).unwrap();
        let c = generate_synthetic_pair(10, 32, 32, &spec).unwrap();
        assert_eq!(a.pair, b.pair);
        assert_ne!(a.pair, c.pair);
    }

    #[test]
    fn rejects_excessive_motion_and_small_frames() {
        let far = MotionSpec::Global(Affine::translation(40.0, 0.0));
        assert!(matches!(generate_synthetic_pair(0, 64, 64, &far), Err(DataError::Motion(_))));
        let fast = MotionSpec::Random(MotionBounds::translations(20.0));
        assert!(matches!(generate_synthetic_pair(0, 32, 32, &fast), Err(DataError::Motion(_))));
        assert!(generate_synthetic_pair(0, 16, 64, &MotionSpec::identity()).is_err());
        assert!(Affine::new([[1.0, 0.0], [1.0, 0.0]], [0.0, 0.0]).is_err());
    }

    #[test]
    fn affine_inverse_round_trips() {
        let a = Affine::similarity_about(17.0, 1.3, 4.0, -2.0).unwrap();
        let mut b = a;
        b.translation[0] += 3.0;
        let (x, y) = b.apply(1.5, 2.5);
        let (bx, by) = b.inverse().apply(x, y);
        assert!((bx - 1.5).abs() < 1e-12 && (by - 2.5).abs() < 1e-12);
    }
}
