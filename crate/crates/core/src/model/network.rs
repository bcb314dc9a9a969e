//! Forward pass of the multi-scale correlation network.
//!
//! ```text
//! image ─ conv1/2 ─ Ỹ ─ conv3 ─ Y ─┬─ conv ─────────── F^L   (finest)
//!                                  └─ pool ─ conv ──── F^L-1 ... F^1 (coarsest)
//! corr(F^A,l, F^B,l) = M^l ─ 3 convs ─ Q^l ─ recurrent cell over l = 1..L ─ H^l
//! H^l ─ repeated deconvolution ─ P^l;  concat(Ỹ^A, P^1..P^L) ─ head ─ flow
//! ```

use super::params::BoundParams;
use super::{ModelConfig, ModelError, ModelParams, PREDICTION_STRIDE};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

/// Epsilon of the per-pixel feature normalization ahead of the correlation.
const FEATURE_NORM_EPS: f64 = 1e-6;

/// Output of the shared extractor.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    /// Third convolution output, the input of the pyramid.
    pub y: Var,
    /// Second convolution output, reused by the head and the reconstruction loss.
    pub y_tilde: Var,
}

/// Intermediate values of the recurrent cell, one entry per scale (coarse to fine).
#[derive(Debug, Clone, Default)]
pub struct GruTrace {
    /// Upsampled hidden state entering each step (the initial state for step 0).
    pub previous: Vec<Var>,
    pub update_gate: Vec<Var>,
    pub reset_gate: Vec<Var>,
    pub candidate: Vec<Var>,
    pub hidden: Vec<Var>,
    /// Hidden state doubled in size for the next step; absent after the finest step.
    pub upsampled: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Flow at `1 / PREDICTION_STRIDE` resolution, in pixels of that resolution.
    pub flow: Var,
    pub features_a: Features,
    pub features_b: Features,
    pub pyramid_a: Vec<Var>,
    pub pyramid_b: Vec<Var>,
    pub correlations: Vec<Var>,
    pub encoded: Vec<Var>,
    pub gru: GruTrace,
    pub projected: Vec<Var>,
}

fn same_pad(k: usize) -> usize {
    k / 2
}

/// Maps `[0, 1]` intensities to the `[-1, 1]` network input range.
pub fn to_network_input<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let two = T::of(2.0);
    image.map(|v| v * two - T::one())
}

fn conv_act<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    slope: f64,
) -> Result<Var, ModelError> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    let y = tape.conv2d(x, w, Some(b), stride, pad)?;
    Ok(tape.leaky_relu(y, slope)?)
}

pub fn check_input_size(cfg: &ModelConfig, shape: Shape) -> Result<(), ModelError> {
    let m = cfg.required_multiple();
    if shape.c() != 3 {
        return Err(ModelError::Config(format!("images need 3 channels, got {}", shape.c())));
    }
    if shape.h() % m != 0 || shape.w() % m != 0 {
        return Err(ModelError::Divisibility {
            height: shape.h(),
            width: shape.w(),
            multiple: m,
        });
    }
    Ok(())
}

/// Shared convolution stack applied to one normalized image.
pub fn extract_shared_features<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    image: Var,
) -> Result<Features, ModelError> {
    check_input_size(cfg, tape.shape(image))?;
    let s = cfg.leaky_slope;
    let c1 = conv_act(tape, p, "extractor.conv1", image, 2, same_pad(cfg.conv1_kernel), s)?;
    let y_tilde = conv_act(tape, p, "extractor.conv2", c1, 2, same_pad(cfg.mid_kernel), s)?;
    let y = conv_act(tape, p, "extractor.conv3", y_tilde, 1, same_pad(cfg.mid_kernel), s)?;
    Ok(Features { y, y_tilde })
}

/// Pool/conv branches producing `num_scales` maps, coarse to fine, each half
/// the size of the next. The branch convolutions have no activation.
pub fn build_pyramid<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    y: Var,
) -> Result<Vec<Var>, ModelError> {
    let pad = same_pad(cfg.kernel);
    let mut levels = vec![None; cfg.num_scales];
    let mut current = y;
    for l in (0..cfg.num_scales).rev() {
        if l + 1 < cfg.num_scales {
            current = tape.maxpool(current, 2, 2)?;
        }
        // No activation: features stay signed going into the cosine correlation.
        let name = format!("pyramid.{l}");
        let w = p.var(&format!("{name}.weight"))?;
        let b = p.var(&format!("{name}.bias"))?;
        levels[l] = Some(tape.conv2d(current, w, Some(b), 1, pad)?);
    }
    Ok(levels.into_iter().map(|v| v.expect("every level built")).collect())
}

/// Per-scale correlation volumes. Features are first rescaled per pixel to
/// length `sqrt(C)`, so every score is the cosine similarity of two vectors.
pub fn correlation_pyramid<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pyramid_a: &[Var],
    pyramid_b: &[Var],
) -> Result<Vec<Var>, ModelError> {
    if pyramid_a.len() != cfg.num_scales || pyramid_b.len() != cfg.num_scales {
        return Err(ModelError::Config(format!(
            "pyramids have {} and {} levels, config has {}",
            pyramid_a.len(),
            pyramid_b.len(),
            cfg.num_scales
        )));
    }
    let mut out = Vec::with_capacity(cfg.num_scales);
    for ((&fa, &fb), &d) in pyramid_a.iter().zip(pyramid_b).zip(&cfg.max_displacements) {
        let scale = T::of((tape.shape(fa).c() as f64).sqrt());
        let na = tape.normalize_channels(fa, scale, T::of(FEATURE_NORM_EPS))?;
        let nb = tape.normalize_channels(fb, scale, T::of(FEATURE_NORM_EPS))?;
        out.push(tape.correlation(na, nb, d, cfg.patch_radius)?);
    }
    Ok(out)
}

/// Three same-size convolutions per scale.
pub fn encode_correlations<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    volumes: &[Var],
) -> Result<Vec<Var>, ModelError> {
    let pad = same_pad(cfg.kernel);
    volumes
        .iter()
        .enumerate()
        .map(|(l, &m)| {
            let mut x = m;
            for i in 0..3 {
                x = conv_act(tape, p, &format!("encoder.{l}.conv{i}"), x, 1, pad, cfg.leaky_slope)?;
            }
            Ok(x)
        })
        .collect()
}

fn gate<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    name: &str,
    q: Var,
    h: Var,
    pad: usize,
) -> Result<Var, ModelError> {
    let wq = tape.conv2d(
        q,
        p.var(&format!("gru.w_{name}.weight"))?,
        Some(p.var(&format!("gru.w_{name}.bias"))?),
        1,
        pad,
    )?;
    let uh = tape.conv2d(h, p.var(&format!("gru.u_{name}.weight"))?, None, 1, pad)?;
    Ok(tape.add(wq, uh)?)
}

/// Recurrent fusion over the scale sequence, coarse to fine:
///
/// ```text
/// Z = σ(W_z*Q + U_z*H↑)      R = σ(W_r*Q + U_r*H↑)
/// H̃ = tanh(W*Q + U*(R⊙H↑))   H = (1-Z)⊙H↑ + Z⊙H̃     H↑' = W↑ ⊛ H
/// ```
///
/// `initial` defaults to zeros at the coarsest scale.
pub fn spatial_conv_gru<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    encoded: &[Var],
    initial: Option<Var>,
) -> Result<GruTrace, ModelError> {
    let first = *encoded
        .first()
        .ok_or_else(|| ModelError::Config("recurrent cell needs at least one scale".into()))?;
    let qs = tape.shape(first);
    let mut prev = match initial {
        Some(h) => h,
        None => tape.constant(Tensor::zeros(Shape::new(qs.n(), cfg.hidden_channels, qs.h(), qs.w()))),
    };
    let pad = same_pad(cfg.kernel);
    let mut trace = GruTrace::default();
    for (l, &q) in encoded.iter().enumerate() {
        let (sq, sh) = (tape.shape(q), tape.shape(prev));
        if sq.h() != sh.h() || sq.w() != sh.w() || sq.n() != sh.n() {
            return Err(ModelError::Config(format!(
                "scale {l}: hidden state {sh} does not match encoded correlation {sq}"
            )));
        }
        let z_pre = gate(tape, p, "z", q, prev, pad)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = gate(tape, p, "r", q, prev, pad)?;
        let r = tape.sigmoid(r_pre)?;
        let gated = tape.mul(r, prev)?;
        let h_pre = gate(tape, p, "h", q, gated, pad)?;
        let cand = tape.tanh(h_pre)?;
        let keep = tape.one_minus(z)?;
        let old = tape.mul(keep, prev)?;
        let new = tape.mul(z, cand)?;
        let h = tape.add(old, new)?;
        trace.previous.push(prev);
        trace.update_gate.push(z);
        trace.reset_gate.push(r);
        trace.candidate.push(cand);
        trace.hidden.push(h);
        if l + 1 < encoded.len() {
            let up = upsample_hidden(tape, p, cfg, h)?;
            trace.upsampled.push(up);
            prev = up;
        }
    }
    Ok(trace)
}

fn upsample_hidden<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    h: Var,
) -> Result<Var, ModelError> {
    let w = p.var("gru.up.weight")?;
    let b = p.var("gru.up.bias")?;
    Ok(tape.transposed_conv2d(h, w, Some(b), 2, cfg.deconv_padding())?)
}

/// Brings every hidden state to the finest scale by repeated doubling with the
/// recurrent cell's deconvolution.
pub fn project_hidden<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    hidden: &[Var],
) -> Result<Vec<Var>, ModelError> {
    let last = hidden.len().saturating_sub(1);
    hidden
        .iter()
        .enumerate()
        .map(|(l, &h)| {
            let mut x = h;
            for _ in l..last {
                x = upsample_hidden(tape, p, cfg, x)?;
            }
            Ok(x)
        })
        .collect()
}

/// Concatenates the second-convolution features of image A with the projected
/// hidden states and regresses a two-channel flow at prediction resolution.
pub fn predict_flow<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    projected: &[Var],
    y_tilde_a: Var,
) -> Result<Var, ModelError> {
    let mut parts = vec![y_tilde_a];
    parts.extend_from_slice(projected);
    let e = tape.concat_channels(&parts)?;
    let pad = same_pad(cfg.kernel);
    let x = conv_act(tape, p, "head.conv0", e, 1, pad, cfg.leaky_slope)?;
    let w = p.var("head.conv1.weight")?;
    let b = p.var("head.conv1.bias")?;
    Ok(tape.conv2d(x, w, Some(b), 1, pad)?)
}

/// Full pipeline on normalized images of shape `(B, 3, H, W)`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    image_a: Var,
    image_b: Var,
) -> Result<ForwardOutput, ModelError> {
    let (sa, sb) = (tape.shape(image_a), tape.shape(image_b));
    if sa != sb {
        return Err(ModelError::Config(format!("image shapes differ: {sa} vs {sb}")));
    }
    let features_a = extract_shared_features(tape, p, cfg, image_a)?;
    let features_b = extract_shared_features(tape, p, cfg, image_b)?;
    let pyramid_a = build_pyramid(tape, p, cfg, features_a.y)?;
    let pyramid_b = build_pyramid(tape, p, cfg, features_b.y)?;
    let correlations = correlation_pyramid(tape, cfg, &pyramid_a, &pyramid_b)?;
    let encoded = encode_correlations(tape, p, cfg, &correlations)?;
    let gru = spatial_conv_gru(tape, p, cfg, &encoded, None)?;
    let projected = project_hidden(tape, p, cfg, &gru.hidden)?;
    let flow = predict_flow(tape, p, cfg, &projected, features_a.y_tilde)?;
    Ok(ForwardOutput {
        flow,
        features_a,
        features_b,
        pyramid_a,
        pyramid_b,
        correlations,
        encoded,
        gru,
        projected,
    })
}

/// Inference on `[0, 1]` images: returns full-resolution flow in image pixels.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    image_a: &Tensor<T>,
    image_b: &Tensor<T>,
) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let a = tape.constant(to_network_input(image_a));
    let b = tape.constant(to_network_input(image_b));
    let out = forward(&mut tape, &bound, cfg, a, b)?;
    Ok(super::upsample_flow(tape.value(out.flow), PREDICTION_STRIDE))
}
