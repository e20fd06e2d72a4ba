use super::{Tape, Tensor, Var};
use crate::error::{bail, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        bail!(Numeric, "objective evaluated to {v}");
    }
    Ok(v)
}

/// Compares tape gradients of a scalar objective against central finite
/// differences and returns the worst [`relative_error`] over all
/// coordinates of all `params`.
///
/// The numeric derivative uses the fourth-order central stencil
/// `(8(f(x+h) - f(x-h)) + f(x-2h) - f(x+2h)) / 12h`, grouped so that an
/// objective that ignores a coordinate yields exactly zero.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        bail!(Domain, "finite-difference step must be positive");
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(&p.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        bail!(Numeric, "objective evaluated to {}", tape.scalar(out));
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf requires grad").to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = params[pi].data()[j];
            let mut at = |dx: f64| -> Result<f64> {
                work[pi].data_mut()[j] = x0 + dx;
                eval(&f, &work)
            };
            let (m2, m1, p1, p2) = (at(-2.0 * step)?, at(-step)?, at(step)?, at(2.0 * step)?);
            work[pi].data_mut()[j] = x0;
            let numeric = (8.0 * (p1 - m1) + (m2 - p2)) / (12.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.7, -0.1, 1.5]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = Tensor::scalar(4.0);
        let err = grad_check(
            |t, v| {
                let _ = v;
                let k = t.constant(&c);
                t.sum(k)
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let x = Tensor::new(&[1], vec![f64::INFINITY]).unwrap();
        let r = grad_check(|t, v| t.sum(v[0]), &[x], 1e-3);
        assert!(matches!(r, Err(crate::Error::Numeric(_))));
    }
}
