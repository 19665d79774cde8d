use super::{AutodiffError, Real, Result, Tape, Tensor, Var};

/// How the central-difference side treats `stop_gradient`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckMode {
    /// Perturbed evaluations recompute everything, stop-gradient values included.
    /// Only meaningful for graphs without `stop_gradient`.
    Plain,
    /// Perturbed evaluations replay the stop-gradient values of the unperturbed
    /// point, so finite differences see detached quantities as constants.
    StopGradAware,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the worst coordinate error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` receives a fresh tape and one differentiable leaf per entry of `point`.
pub fn grad_check<T, F>(f: F, point: &[Tensor<T>], eps: f64, mode: GradCheckMode) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::GradCheck(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let inputs: Vec<Var> = point.iter().map(|p| tape.var(p.clone())).collect();
    let root = f(&mut tape, &inputs)?;
    let grads = tape.backward(root)?;
    let stops = tape.recorded_stops().to_vec();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut tape = match mode {
            GradCheckMode::Plain => Tape::new(),
            GradCheckMode::StopGradAware => Tape::replaying_stops(stops.clone()),
        };
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.var(p.clone())).collect();
        let out = f(&mut tape, &vars).map_err(|e| match e {
            AutodiffError::NonFinite { .. } => {
                AutodiffError::GradCheck(format!("function not finite at perturbed point: {e}"))
            }
            other => other,
        })?;
        let v = tape.item(out);
        if !v.is_finite() {
            return Err(AutodiffError::GradCheck(
                "function not finite at perturbed point".into(),
            ));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = point.to_vec();
    for (i, &v) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, v);
        for k in 0..point[i].numel() {
            let orig = point[i].data()[k];
            work[i].data_mut()[k] = T::of(orig.as_f64() + eps);
            let plus = eval(&work)?;
            work[i].data_mut()[k] = T::of(orig.as_f64() - eps);
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].as_f64();
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_two() {
        let err = grad_check(
            |t: &mut Tape<f64>, x| t.mul(x[0], x[0]),
            &[Tensor::scalar(2.0)],
            1e-4,
            GradCheckMode::Plain,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |t: &mut Tape<f64>, _x| Ok(t.scalar(4.0)),
            &[Tensor::vector(vec![1.0, 2.0])],
            1e-4,
            GradCheckMode::Plain,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    fn sg_product(t: &mut Tape<f64>, x: &[Var]) -> Result<Var> {
        let c = t.stop_gradient(x[0])?;
        let p = t.mul(c, x[0])?;
        t.sum(p)
    }

    #[test]
    fn stop_gradient_needs_aware_mode() {
        // f(x) = Σ sg(x)·x: analytic gradient x, plain differences see 2x.
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let plain = grad_check(sg_product, &[x.clone()], 1e-5, GradCheckMode::Plain).unwrap();
        assert!(plain > 0.1, "{plain}");
        let aware = grad_check(sg_product, &[x.clone()], 1e-5, GradCheckMode::StopGradAware).unwrap();
        assert!(aware < 1e-8, "{aware}");

        let mut tape = Tape::new();
        let v = tape.var(x.clone());
        let r = sg_product(&mut tape, &[v]).unwrap();
        assert_eq!(tape.backward(r).unwrap().wrt(&tape, v), x.data().to_vec());
    }

    #[test]
    fn non_finite_perturbation_rejected() {
        // 1/(x - 1e-5) is infinite at x + eps
        let r = grad_check(
            |t: &mut Tape<f64>, x| {
                let s = t.offset(x[0], -1e-5)?;
                let one = t.scalar(1.0);
                t.div(one, s)
            },
            &[Tensor::scalar(0.0)],
            1e-5,
            GradCheckMode::Plain,
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_non_positive_eps() {
        let r = grad_check(
            |t: &mut Tape<f64>, x| t.sum(x[0]),
            &[Tensor::scalar(1.0)],
            0.0,
            GradCheckMode::Plain,
        );
        assert!(matches!(r, Err(AutodiffError::GradCheck(_))));
    }
}
