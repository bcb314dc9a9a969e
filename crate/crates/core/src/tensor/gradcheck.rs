use super::{Result, Shape, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over the checked coordinates.
    pub max_rel_error: f64,
    /// Flat index of the coordinate attaining the maximum.
    pub worst_index: usize,
    pub checked: usize,
}

fn evaluate<F>(f: &F, x: Tensor<f64>, backward: bool) -> Result<(f64, Option<Tensor<f64>>)>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let out = f(&mut tape, xv)?;
    let shape = tape.shape(out);
    if shape != Shape::scalar() {
        return Err(TensorError::NotScalar(shape));
    }
    let value = tape.value(out).data()[0];
    if !value.is_finite() {
        return Err(TensorError::NonFinite("gradient_check objective"));
    }
    if !backward {
        return Ok((value, None));
    }
    tape.backward(out)?;
    let grad = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(tape.shape(xv)));
    Ok((value, Some(grad)))
}

/// Compares the tape gradient of a scalar function against central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` at every coordinate of `x`.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.shape().len()).collect();
    gradient_check_at(f, x, h, &all)
}

/// Same as [`gradient_check`] restricted to the given flat coordinates.
pub fn gradient_check_at<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let (_, grad) = evaluate(&f, x.clone(), true)?;
    let grad = grad.expect("backward requested");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, _) = evaluate(&f, plus, false)?;
        let (fm, _) = evaluate(&f, minus, false)?;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad.data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(Shape::new(1, 2, 3, 3), -3.0, 3.0, &mut rng);
        let r = gradient_check(|t, x| t.sum(x), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 18);
    }

    #[test]
    fn sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(Shape::new(1, 1, 4, 4), -2.0, 2.0, &mut rng);
        let r = gradient_check(
            |t, x| {
                let y = t.sigmoid(x)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn rejects_non_finite_objective() {
        let x = Tensor::scalar(f64::NAN);
        assert!(gradient_check(|t, x| t.sum(x), &x, 1e-5).is_err());
    }
}
