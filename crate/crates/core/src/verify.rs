//! Finite-difference verification of every differentiable operation and of
//! the assembled network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::network::spatial_conv_gru;
use crate::model::{forward, ModelConfig, ModelError, ModelParams};
use crate::tensor::{gradient_check, gradient_check_at, GradCheckReport, Shape, Tape, Tensor, TensorError, Var};

/// Tolerance on the relative error for a single operation.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance on the relative error through the whole network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

const STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces `out` to a scalar through fixed random weights so that every
/// output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let w = tape.constant(random(tape.shape(out), seed));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn model_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "model",
            msg: other.to_string(),
        },
    }
}

struct Suite {
    entries: Vec<GradCheckEntry>,
}

impl Suite {
    fn op<F>(&mut self, name: &str, x: Tensor<f64>, f: F) -> Result<(), TensorError>
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
    {
        let report = gradient_check(f, &x, STEP)?;
        self.entries.push(GradCheckEntry {
            name: name.to_string(),
            report,
            tolerance: OP_TOLERANCE,
        });
        Ok(())
    }
}

/// Checks each operation with respect to each of its differentiable inputs.
pub fn operation_suite() -> Result<Vec<GradCheckEntry>, TensorError> {
    let mut s = Suite { entries: Vec::new() };
    let x = random(Shape::new(2, 3, 7, 6), 1);
    let w = random(Shape::new(4, 3, 3, 3), 2);
    let b = random(Shape::new(1, 4, 1, 1), 3);

    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let tag = format!("conv2d s{stride} p{pad}");
        s.op(&format!("{tag} input"), x.clone(), |t, v| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(v, w, Some(b), stride, pad)?;
            weighted_sum(t, y, 10)
        })?;
        s.op(&format!("{tag} weight"), w.clone(), |t, v| {
            let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
            let y = t.conv2d(x, v, Some(b), stride, pad)?;
            weighted_sum(t, y, 11)
        })?;
        s.op(&format!("{tag} bias"), b.clone(), |t, v| {
            let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.conv2d(x, w, Some(v), stride, pad)?;
            weighted_sum(t, y, 12)
        })?;
    }

    let tx = random(Shape::new(2, 3, 4, 5), 4);
    let tw = random(Shape::new(3, 2, 4, 4), 5);
    let tb = random(Shape::new(1, 2, 1, 1), 6);
    s.op("transposed_conv2d input", tx.clone(), |t, v| {
        let (w, b) = (t.constant(tw.clone()), t.constant(tb.clone()));
        let y = t.transposed_conv2d(v, w, Some(b), 2, 1)?;
        weighted_sum(t, y, 13)
    })?;
    s.op("transposed_conv2d weight", tw.clone(), |t, v| {
        let (x, b) = (t.constant(tx.clone()), t.constant(tb.clone()));
        let y = t.transposed_conv2d(x, v, Some(b), 2, 1)?;
        weighted_sum(t, y, 14)
    })?;
    s.op("transposed_conv2d bias", tb.clone(), |t, v| {
        let (x, w) = (t.constant(tx.clone()), t.constant(tw.clone()));
        let y = t.transposed_conv2d(x, w, Some(v), 2, 1)?;
        weighted_sum(t, y, 15)
    })?;

    s.op("maxpool", random(Shape::new(2, 2, 6, 8), 7), |t, v| {
        let y = t.maxpool(v, 2, 2)?;
        weighted_sum(t, y, 16)
    })?;
    let act = random(Shape::new(1, 2, 4, 4), 8).map(|v| 3.0 * v);
    s.op("sigmoid", act.clone(), |t, v| {
        let y = t.sigmoid(v)?;
        weighted_sum(t, y, 17)
    })?;
    s.op("tanh", act.clone(), |t, v| {
        let y = t.tanh(v)?;
        weighted_sum(t, y, 18)
    })?;
    s.op("leaky_relu", act.clone(), |t, v| {
        let y = t.leaky_relu(v, 0.1)?;
        weighted_sum(t, y, 19)
    })?;
    s.op("normalize_channels", random(Shape::new(2, 4, 3, 3), 9), |t, v| {
        let y = t.normalize_channels(v, 2.0, 1e-6)?;
        weighted_sum(t, y, 20)
    })?;

    let fa = random(Shape::new(1, 3, 6, 7), 21);
    let fb = random(Shape::new(1, 3, 6, 7), 22);
    for (d, k) in [(2, 0), (1, 1)] {
        s.op(&format!("correlation d{d} k{k} first"), fa.clone(), |t, v| {
            let b = t.constant(fb.clone());
            let y = t.correlation(v, b, d, k)?;
            weighted_sum(t, y, 23)
        })?;
        s.op(&format!("correlation d{d} k{k} second"), fb.clone(), |t, v| {
            let a = t.constant(fa.clone());
            let y = t.correlation(a, v, d, k)?;
            weighted_sum(t, y, 24)
        })?;
    }

    let img = random(Shape::new(2, 3, 6, 7), 25);
    let flow = random(Shape::new(2, 2, 6, 7), 26).map(|v| 2.5 * v);
    s.op("bilinear_warp image", img.clone(), |t, v| {
        let f = t.constant(flow.clone());
        let y = t.bilinear_warp(v, f)?;
        weighted_sum(t, y, 27)
    })?;
    s.op("bilinear_warp flow", flow.clone(), |t, v| {
        let i = t.constant(img.clone());
        let y = t.bilinear_warp(i, v)?;
        weighted_sum(t, y, 28)
    })?;

    let gt = random(Shape::new(2, 2, 5, 5), 29);
    let pred = random(Shape::new(2, 2, 5, 5), 30);
    let mask = Tensor::from_fn(Shape::new(2, 1, 5, 5), |_, _, y, x| if (x + y) % 3 == 0 { 0.0 } else { 1.0 });
    s.op("epe_loss", pred.clone(), |t, v| {
        let g = t.constant(gt.clone());
        t.epe_loss(v, g, Some(mask.clone()))
    })?;
    let flow1 = flow.batch_item(0);
    s.op("reconstruction_loss first", fa.clone(), |t, v| {
        let (b, f) = (t.constant(fb.clone()), t.constant(flow1.clone()));
        t.reconstruction_loss(v, b, f)
    })?;
    s.op("reconstruction_loss second", fb.clone(), |t, v| {
        let (a, f) = (t.constant(fa.clone()), t.constant(flow1.clone()));
        t.reconstruction_loss(a, v, f)
    })?;
    s.op("reconstruction_loss flow", flow1.clone(), |t, v| {
        let (a, b) = (t.constant(fa.clone()), t.constant(fb.clone()));
        t.reconstruction_loss(a, b, v)
    })?;

    gru_checks(&mut s)?;
    Ok(s.entries)
}

/// One recurrent step plus the transposed-convolution hand-off to a second scale.
fn gru_checks(s: &mut Suite) -> Result<(), TensorError> {
    let mut cfg = ModelConfig::tiny();
    cfg.num_scales = 2;
    cfg.max_displacements = vec![1, 1];
    cfg.encoder_channels = 3;
    cfg.hidden_channels = 4;
    cfg.validate().map_err(model_error)?;
    let params = ModelParams::<f64>::init(&cfg, 31).map_err(model_error)?;
    let q0 = random(Shape::new(1, 3, 3, 3), 32);
    let q1 = random(Shape::new(1, 3, 6, 6), 33);
    let h0 = random(Shape::new(1, 4, 3, 3), 34);

    let run = |t: &mut Tape<f64>, swap: Option<(&str, Var)>, q: Option<Var>, h: Option<Var>| {
        let mut bound = params.bind(t, false);
        if let Some((name, v)) = swap {
            bound.replace(name, v).map_err(model_error)?;
        }
        let q = match q {
            Some(q) => q,
            None => t.constant(q0.clone()),
        };
        let h = match h {
            Some(h) => h,
            None => t.constant(h0.clone()),
        };
        let q1 = t.constant(q1.clone());
        let trace = spatial_conv_gru(t, &bound, &cfg, &[q, q1], Some(h)).map_err(model_error)?;
        let last = *trace.hidden.last().expect("two scales");
        weighted_sum(t, last, 35)
    };
    s.op("gru encoded input", q0.clone(), |t, v| run(t, None, Some(v), None))?;
    s.op("gru hidden state", h0.clone(), |t, v| run(t, None, None, Some(v)))?;
    for name in [
        "gru.w_z.weight",
        "gru.w_z.bias",
        "gru.u_z.weight",
        "gru.w_r.weight",
        "gru.u_r.weight",
        "gru.w_h.weight",
        "gru.u_h.weight",
        "gru.up.weight",
    ] {
        let x = params
            .get(name)
            .ok_or_else(|| TensorError::Invalid {
                op: "gradient suite",
                msg: format!("missing parameter {name}"),
            })?
            .clone();
        s.op(name, x, |t, v| run(t, Some((name, v)), None, None))?;
    }
    Ok(())
}

/// Checks the full network loss (supervised plus reconstruction) with
/// respect to a sample of coordinates in selected parameters.
pub fn network_suite(cfg: &ModelConfig, seed: u64) -> Result<Vec<GradCheckEntry>, TensorError> {
    let params = ModelParams::<f64>::init(cfg, seed).map_err(model_error)?;
    let side = 2 * cfg.required_multiple().max(16);
    let a = random(Shape::new(1, 3, side, side), seed ^ 1);
    let b = random(Shape::new(1, 3, side, side), seed ^ 2);
    let stride = crate::model::PREDICTION_STRIDE;
    let gt = random(Shape::new(1, 2, side / stride, side / stride), seed ^ 3).map(|v| 2.0 * v);

    let loss = |t: &mut Tape<f64>, name: &str, v: Var| -> Result<Var, TensorError> {
        let mut bound = params.bind(t, false);
        bound.replace(name, v).map_err(model_error)?;
        let (a, b, g) = (t.constant(a.clone()), t.constant(b.clone()), t.constant(gt.clone()));
        let out = forward(t, &bound, cfg, a, b).map_err(model_error)?;
        let terms = t.total_loss(out.flow, g, None, out.features_a.y_tilde, out.features_b.y_tilde, 0.005)?;
        Ok(terms.total)
    };
    let names = [
        "extractor.conv1.weight",
        "gru.u_h.weight",
        "gru.w_z.weight",
        "gru.up.weight",
        "head.conv1.weight",
    ];
    let mut entries = Vec::new();
    for name in names {
        let Some(x) = params.get(name) else { continue };
        let coords: Vec<usize> = (0..4).map(|i| (i * 7919 + 13) % x.shape().len()).collect();
        let report = gradient_check_at(|t, v| loss(t, name, v), x, STEP, &coords)?;
        entries.push(GradCheckEntry {
            name: format!("network via {name}"),
            report,
            tolerance: NETWORK_TOLERANCE,
        });
    }
    Ok(entries)
}
