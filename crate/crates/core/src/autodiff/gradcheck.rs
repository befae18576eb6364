use super::{AutodiffError, Tape, Tensor, Var};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must return
/// a scalar. The result is the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(AutodiffError::InvalidStep(step));
    }

    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &leaves)?;
    if !tape.value(root).all_finite() {
        return Err(AutodiffError::NonFiniteObjective);
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = f(&mut tape, &leaves)?;
        let value = tape.value(root);
        if !value.is_scalar() {
            return Err(AutodiffError::NotScalar {
                shape: value.shape().to_vec(),
            });
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(AutodiffError::NonFiniteObjective);
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (j, grad) in analytic.iter().enumerate() {
        for c in 0..params[j].len() {
            let original = params[j].data()[c];
            work[j].data_mut()[c] = original + step;
            let plus = eval(&work)?;
            work[j].data_mut()[c] = original - step;
            let minus = eval(&work)?;
            work[j].data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let err = (grad.data()[c] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum_last(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);

        let err = finite_diff_check(
            |t, p| {
                let sq = t.mul(p[0], p[0])?;
                t.sum_last(sq)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let err = finite_diff_check(
            |t, _| Ok(t.constant(Tensor::scalar(3.5))),
            &[x],
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_objective() {
        let x = Tensor::vector(vec![1.0]);
        assert!(matches!(
            finite_diff_check(|t, p| t.reduce_mean(p[0]), std::slice::from_ref(&x), 0.0),
            Err(AutodiffError::InvalidStep(_))
        ));
        let neg = Tensor::vector(vec![-1.0]);
        let res = finite_diff_check(
            |t, p| {
                t.set_finite_checks(false);
                let l = t.log(p[0])?;
                t.reduce_mean(l)
            },
            &[neg],
            1e-6,
        );
        assert!(matches!(res, Err(AutodiffError::NonFiniteObjective)));
    }
}
