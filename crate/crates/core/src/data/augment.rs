use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Affine, DataError, SamplePair};
use crate::tensor::{Shape, Tensor};

/// Ranges `(lo, hi)` for each random transform. Equal bounds fix a value.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub scale: (f64, f64),
    pub rotation_deg: (f64, f64),
    /// Translation as a fraction of the frame side.
    pub translation: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub contrast: (f64, f64),
    /// Multiplicative per-channel colour factor.
    pub color: (f64, f64),
    pub gamma: (f64, f64),
    pub brightness: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            scale: (0.9, 1.1),
            rotation_deg: (-10.0, 10.0),
            translation: (-0.05, 0.05),
            noise_sigma: (0.0, 0.04),
            contrast: (0.8, 1.2),
            color: (0.9, 1.1),
            gamma: (0.8, 1.2),
            brightness: (-0.1, 0.1),
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            scale: (1.0, 1.0),
            rotation_deg: (0.0, 0.0),
            translation: (0.0, 0.0),
            noise_sigma: (0.0, 0.0),
            contrast: (1.0, 1.0),
            color: (1.0, 1.0),
            gamma: (1.0, 1.0),
            brightness: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ranges = [
            ("scale", self.scale),
            ("rotation_deg", self.rotation_deg),
            ("translation", self.translation),
            ("noise_sigma", self.noise_sigma),
            ("contrast", self.contrast),
            ("color", self.color),
            ("gamma", self.gamma),
            ("brightness", self.brightness),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(DataError::Augment(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        let positive = [("scale", self.scale), ("gamma", self.gamma), ("contrast", self.contrast)];
        for (name, (lo, _)) in positive {
            if !(lo > 0.0) {
                return Err(DataError::Augment(format!("{name} must be positive, got {lo}")));
            }
        }
        if self.noise_sigma.0 < 0.0 || self.color.0 < 0.0 {
            return Err(DataError::Augment("noise and colour factors must be non-negative".into()));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Photometric parameters of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Photometric {
    pub contrast: f64,
    pub color: [f64; 3],
    pub gamma: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
}

impl Photometric {
    fn draw(rng: &mut ChaCha8Rng, p: &AugmentPolicy) -> Self {
        Photometric {
            contrast: draw(rng, p.contrast),
            color: [draw(rng, p.color), draw(rng, p.color), draw(rng, p.color)],
            gamma: draw(rng, p.gamma),
            brightness: draw(rng, p.brightness),
            noise_sigma: draw(rng, p.noise_sigma),
        }
    }
}

/// Applies contrast, colour, gamma, brightness and Gaussian noise, then clamps
/// to `[0, 1]`. Steps at their identity value are skipped, so an identity
/// setting leaves the image bit-exact.
pub fn apply_photometric(image: &Tensor<f32>, p: &Photometric, rng: &mut impl Rng) -> Tensor<f32> {
    let mut out = image.clone();
    let s = out.shape();
    let plane = s.plane();
    let noise = (p.noise_sigma > 0.0).then(|| Normal::new(0.0, p.noise_sigma).expect("sigma is positive"));
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % s.c();
        let mut x = *v as f64;
        if p.contrast != 1.0 {
            x = (x - 0.5) * p.contrast + 0.5;
        }
        if p.color[c] != 1.0 {
            x *= p.color[c];
        }
        if p.gamma != 1.0 {
            x = x.clamp(0.0, 1.0).powf(p.gamma);
        }
        if p.brightness != 0.0 {
            x += p.brightness;
        }
        if let Some(n) = &noise {
            x += n.sample(rng);
        }
        *v = x.clamp(0.0, 1.0) as f32;
    }
    out
}

fn bilinear(t: &Tensor<f32>, c: usize, x: f64, y: f64) -> f64 {
    let s = t.shape();
    let x = x.clamp(0.0, (s.w() - 1) as f64);
    let y = y.clamp(0.0, (s.h() - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(s.w() - 1), (y0 + 1).min(s.h() - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let v = |yy, xx| t.at(0, c, yy, xx) as f64;
    let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
    let bottom = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Moves both frames by the same map `g`: output pixel `p'` shows input pixel
/// `g⁻¹ p'`, and the flow becomes `L f(g⁻¹ p')` with `L` the linear part of
/// `g`. Pixels whose source falls outside the frame, or next to an invalid
/// source pixel, are marked invalid.
pub fn apply_geometric(pair: &SamplePair, g: &Affine) -> SamplePair {
    if g.is_identity() {
        return pair.clone();
    }
    let (h, w) = (pair.height(), pair.width());
    let inv = g.inverse();
    let valid_in = pair.valid_mask();
    let mut a = Tensor::zeros(pair.image_a.shape());
    let mut b = Tensor::zeros(pair.image_b.shape());
    let mut flow = Tensor::zeros(pair.flow.shape());
    let mut valid = Tensor::zeros(Shape::new(1, 1, h, w));
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            for c in 0..3 {
                a.set(0, c, y, x, bilinear(&pair.image_a, c, sx, sy) as f32);
                b.set(0, c, y, x, bilinear(&pair.image_b, c, sx, sy) as f32);
            }
            if !((0.0..=xmax).contains(&sx) && (0.0..=ymax).contains(&sy)) {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let ok = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
                .iter()
                .all(|&(yy, xx)| valid_in.at(0, 0, yy, xx) > 0.0);
            if !ok {
                continue;
            }
            let (u, v) = g.apply_linear(bilinear(&pair.flow, 0, sx, sy), bilinear(&pair.flow, 1, sx, sy));
            flow.set(0, 0, y, x, u as f32);
            flow.set(0, 1, y, x, v as f32);
            valid.set(0, 0, y, x, 1.0);
        }
    }
    SamplePair {
        image_a: a,
        image_b: b,
        flow,
        valid: Some(valid),
    }
}

/// Random geometric and photometric augmentation. The geometric map (scale and
/// rotation about the centre, then translation) is shared by both frames.
/// Photometric parameters are drawn once per pair so both frames keep the same
/// brightness relation; noise is drawn independently per frame.
pub fn augment_pair(pair: &SamplePair, seed: u64, policy: &AugmentPolicy) -> Result<SamplePair, DataError> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (pair.height() as f64, pair.width() as f64);
    let scale = draw(&mut rng, policy.scale);
    let rot = draw(&mut rng, policy.rotation_deg);
    let tx = draw(&mut rng, policy.translation) * w;
    let ty = draw(&mut rng, policy.translation) * h;
    let mut g = Affine::similarity_about(rot, scale, (w - 1.0) / 2.0, (h - 1.0) / 2.0)
        .map_err(|e| DataError::Augment(e.to_string()))?;
    g.translation[0] += tx;
    g.translation[1] += ty;
    if g.linear == Affine::identity().linear && g.translation == [0.0, 0.0] {
        g = Affine::identity();
    }
    let mut out = apply_geometric(pair, &g);
    let photo = Photometric::draw(&mut rng, policy);
    out.image_a = apply_photometric(&out.image_a, &photo, &mut rng);
    out.image_b = apply_photometric(&out.image_b, &photo, &mut rng);
    Ok(out)
}
