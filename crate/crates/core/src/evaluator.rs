//! Endpoint-error metrics with velocity and motion-boundary breakdowns.

use std::fmt::Write as _;

use thiserror::Error;

use crate::tensor::{Scalar, Shape, Tensor};

/// Default gradient-magnitude threshold (px/px) for motion boundaries.
pub const BOUNDARY_THRESHOLD: f64 = 1.0;

/// Velocity bins by ground-truth magnitude: `[0,10)`, `[10,40)`, `[40,∞)`.
pub const VELOCITY_BINS: [(&str, f64, f64); 3] = [
    ("s0-10", 0.0, 10.0),
    ("s10-40", 10.0, 40.0),
    ("s40+", 40.0, f64::INFINITY),
];

/// Distance-to-boundary bins: `[0,10)`, `[10,60)`, `[60,140]`.
pub const DISTANCE_BINS: [(&str, f64, f64); 3] = [("d0-10", 0.0, 10.0), ("d10-60", 10.0, 60.0), ("d60-140", 60.0, 140.0)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask selects no pixels")]
    EmptyMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub label: &'static str,
    pub count: usize,
    pub epe_sum: f64,
}

impl BinStats {
    fn new(label: &'static str) -> Self {
        BinStats {
            label,
            count: 0,
            epe_sum: 0.0,
        }
    }

    /// Mean EPE, or `None` for an empty bin.
    pub fn epe(&self) -> Option<f64> {
        (self.count > 0).then(|| self.epe_sum / self.count as f64)
    }
}

fn check_shapes<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<(), EvalError> {
    let (p, g) = (pred.shape(), gt.shape());
    if p != g || p.c() != 2 {
        return Err(EvalError::Shape(format!("prediction {p} and ground truth {g} must both be Nx2xHxW")));
    }
    if let Some(m) = mask {
        if m.shape() != Shape::new(p.n(), 1, p.h(), p.w()) {
            return Err(EvalError::Shape(format!("mask {} does not match flow {p}", m.shape())));
        }
    }
    Ok(())
}

fn is_valid<T: Scalar>(mask: Option<&Tensor<T>>, n: usize, y: usize, x: usize) -> bool {
    mask.is_none_or(|m| m.at(n, 0, y, x) > T::zero())
}

fn vector<T: Scalar>(t: &Tensor<T>, n: usize, y: usize, x: usize) -> (f64, f64) {
    (t.at(n, 0, y, x).as_f64(), t.at(n, 1, y, x).as_f64())
}

fn endpoint_error<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, n: usize, y: usize, x: usize) -> f64 {
    let (pu, pv) = vector(pred, n, y, x);
    let (gu, gv) = vector(gt, n, y, x);
    (pu - gu).hypot(pv - gv)
}

/// Mean over valid pixels of `|pred - gt|`.
pub fn mean_epe<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<f64, EvalError> {
    check_shapes(pred, gt, mask)?;
    let s = pred.shape();
    let (mut sum, mut count) = (0.0, 0usize);
    for n in 0..s.n() {
        for y in 0..s.h() {
            for x in 0..s.w() {
                if is_valid(mask, n, y, x) {
                    sum += endpoint_error(pred, gt, n, y, x);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Mean of `|gt|` over valid pixels: the error of predicting zero flow.
pub fn zero_flow_epe<T: Scalar>(gt: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<f64, EvalError> {
    mean_epe(&Tensor::zeros(gt.shape()), gt, mask)
}

fn bin_index(bins: &[(&str, f64, f64)], value: f64, closed_last: bool) -> Option<usize> {
    bins.iter().enumerate().position(|(i, &(_, lo, hi))| {
        value >= lo && (value < hi || (closed_last && i + 1 == bins.len() && value == hi))
    })
}

/// EPE split by ground-truth speed.
pub fn epe_by_velocity<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Vec<BinStats>, EvalError> {
    check_shapes(pred, gt, mask)?;
    let s = pred.shape();
    let mut bins: Vec<BinStats> = VELOCITY_BINS.iter().map(|b| BinStats::new(b.0)).collect();
    for n in 0..s.n() {
        for y in 0..s.h() {
            for x in 0..s.w() {
                if !is_valid(mask, n, y, x) {
                    continue;
                }
                let (gu, gv) = vector(gt, n, y, x);
                if let Some(i) = bin_index(&VELOCITY_BINS, gu.hypot(gv), false) {
                    bins[i].count += 1;
                    bins[i].epe_sum += endpoint_error(pred, gt, n, y, x);
                }
            }
        }
    }
    Ok(bins)
}

/// Marks pixels of batch item `n` whose forward-difference flow gradient
/// `sqrt(u_x² + u_y² + v_x² + v_y²)` exceeds `tau`. Differences reaching past
/// the border or into an invalid pixel count as zero. Row-major `H*W` output.
pub fn motion_boundaries<T: Scalar>(gt: &Tensor<T>, mask: Option<&Tensor<T>>, n: usize, tau: f64) -> Vec<bool> {
    let s = gt.shape();
    let (h, w) = (s.h(), s.w());
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !is_valid(mask, n, y, x) {
                continue;
            }
            let here = vector(gt, n, y, x);
            let diff = |yy: usize, xx: usize| {
                if yy < h && xx < w && is_valid(mask, n, yy, xx) {
                    let there = vector(gt, n, yy, xx);
                    (there.0 - here.0, there.1 - here.1)
                } else {
                    (0.0, 0.0)
                }
            };
            let (ux, vx) = diff(y, x + 1);
            let (uy, vy) = diff(y + 1, x);
            out[y * w + x] = (ux * ux + uy * uy + vx * vx + vy * vy).sqrt() > tau;
        }
    }
    out
}

/// Exact 1-D squared distance transform of sampled function `f` (lower envelope
/// of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel of a
/// row-major `h x w` grid; infinite when there is none.
pub fn distance_transform(features: &[bool], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(features.len(), h * w, "grid size mismatch");
    let mut sq: Vec<f64> = features.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = sq[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            sq[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&sq[y * w..(y + 1) * w], &mut row_out);
        sq[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// EPE split by distance to the nearest motion boundary of the ground truth.
/// Also returns the number of boundary pixels; with none, every bin is empty.
pub fn epe_by_boundary_distance<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    tau: f64,
) -> Result<(Vec<BinStats>, usize), EvalError> {
    check_shapes(pred, gt, mask)?;
    let s = pred.shape();
    let mut bins: Vec<BinStats> = DISTANCE_BINS.iter().map(|b| BinStats::new(b.0)).collect();
    let mut boundary_pixels = 0;
    for n in 0..s.n() {
        let boundary = motion_boundaries(gt, mask, n, tau);
        boundary_pixels += boundary.iter().filter(|&&b| b).count();
        let dist = distance_transform(&boundary, s.h(), s.w());
        for y in 0..s.h() {
            for x in 0..s.w() {
                if !is_valid(mask, n, y, x) {
                    continue;
                }
                if let Some(i) = bin_index(&DISTANCE_BINS, dist[y * s.w() + x], true) {
                    bins[i].count += 1;
                    bins[i].epe_sum += endpoint_error(pred, gt, n, y, x);
                }
            }
        }
    }
    Ok((bins, boundary_pixels))
}

/// Aggregated metrics over one or more samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EpeReport {
    pub valid_pixels: usize,
    pub epe_sum: f64,
    pub velocity: Vec<BinStats>,
    pub boundary: Vec<BinStats>,
    pub boundary_pixels: usize,
    pub samples: usize,
}

impl Default for EpeReport {
    fn default() -> Self {
        EpeReport {
            valid_pixels: 0,
            epe_sum: 0.0,
            velocity: VELOCITY_BINS.iter().map(|b| BinStats::new(b.0)).collect(),
            boundary: DISTANCE_BINS.iter().map(|b| BinStats::new(b.0)).collect(),
            boundary_pixels: 0,
            samples: 0,
        }
    }
}

impl EpeReport {
    /// Full breakdown of one (possibly batched) prediction.
    pub fn evaluate<T: Scalar>(
        pred: &Tensor<T>,
        gt: &Tensor<T>,
        mask: Option<&Tensor<T>>,
        tau: f64,
    ) -> Result<Self, EvalError> {
        let velocity = epe_by_velocity(pred, gt, mask)?;
        let (boundary, boundary_pixels) = epe_by_boundary_distance(pred, gt, mask, tau)?;
        let valid_pixels: usize = velocity.iter().map(|b| b.count).sum();
        if valid_pixels == 0 {
            return Err(EvalError::EmptyMask);
        }
        Ok(EpeReport {
            valid_pixels,
            epe_sum: velocity.iter().map(|b| b.epe_sum).sum(),
            velocity,
            boundary,
            boundary_pixels,
            samples: pred.shape().n(),
        })
    }

    pub fn merge(&mut self, other: &EpeReport) {
        self.valid_pixels += other.valid_pixels;
        self.epe_sum += other.epe_sum;
        self.boundary_pixels += other.boundary_pixels;
        self.samples += other.samples;
        for (a, b) in self.velocity.iter_mut().chain(&mut self.boundary).zip(other.velocity.iter().chain(&other.boundary)) {
            a.count += b.count;
            a.epe_sum += b.epe_sum;
        }
    }

    pub fn mean_epe(&self) -> Option<f64> {
        (self.valid_pixels > 0).then(|| self.epe_sum / self.valid_pixels as f64)
    }

    /// `key=value` lines; empty bins print `undefined`.
    pub fn to_key_values(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |e| format!("{e:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "valid_pixels={}", self.valid_pixels);
        let _ = writeln!(s, "mean_epe={}", fmt(self.mean_epe()));
        for b in self.velocity.iter().chain(&self.boundary) {
            let _ = writeln!(s, "{}.count={}", b.label, b.count);
            let _ = writeln!(s, "{}.epe={}", b.label, fmt(b.epe()));
        }
        let _ = writeln!(s, "boundary_pixels={}", self.boundary_pixels);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>10} {:>12}", "bin", "EPE", "pixels");
        let row = |s: &mut String, label: &str, epe: Option<f64>, count: usize| {
            let e = epe.map_or_else(|| "-".to_string(), |e| format!("{e:.4}"));
            let _ = writeln!(s, "{label:<10} {e:>10} {count:>12}");
        };
        row(&mut s, "all", self.mean_epe(), self.valid_pixels);
        for b in self.velocity.iter().chain(&self.boundary) {
            row(&mut s, b.label, b.epe(), b.count);
        }
        if self.boundary_pixels == 0 {
            let _ = writeln!(s, "no motion boundaries found; distance bins are empty");
        }
        s
    }
}
