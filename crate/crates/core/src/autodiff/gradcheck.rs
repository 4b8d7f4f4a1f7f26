use super::{AutodiffError, Tape, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks every coordinate of `x`; returns the max relative error.
///
/// `f` receives a fresh tape and `x` as a rank-1 parameter and must return a
/// scalar. A NaN anywhere in the comparison makes the result NaN.
pub fn finite_difference_check<F, E>(f: F, x: &[f64], step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    Ok(finite_difference_check_coords(f, x, step, &coords)?.max_rel_error)
}

/// Like [`finite_difference_check`] restricted to `coords`, with full detail.
pub fn finite_difference_check_coords<F, E>(
    f: F,
    x: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<GradCheck, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.to_vec(), &[x.len()])?;
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let full = tape.grad(xv);

    let eval = |point: Vec<f64>| -> Result<f64, E> {
        let mut t = Tape::new();
        let v = t.constant(point, &[x.len()])?;
        let y = f(&mut t, v)?;
        Ok(t.item(y))
    };

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut max_rel_error: f64 = 0.0;
    let mut worst_coord = coords.first().copied().unwrap_or(0);
    for &i in coords {
        let mut plus = x.to_vec();
        plus[i] += step;
        let mut minus = x.to_vec();
        minus[i] -= step;
        let num = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let ana = full[i];
        let err = (ana - num).abs() / ana.abs().max(1.0);
        if err.is_nan() || max_rel_error.is_nan() {
            max_rel_error = f64::NAN;
        } else if err > max_rel_error {
            max_rel_error = err;
            worst_coord = i;
        }
        analytic.push(ana);
        numeric.push(num);
    }
    Ok(GradCheck {
        max_rel_error,
        worst_coord,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    type R = Result<Var, AutodiffError>;

    #[test]
    fn square_passes() {
        let err = finite_difference_check(
            |t: &mut Tape, x: Var| -> R {
                let s = t.square(x);
                Ok(t.sum(s))
            },
            &[3.0],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_difference_check(
            |t: &mut Tape, x: Var| -> R {
                let z = t.scale(x, 0.0);
                let s = t.sum(z);
                Ok(t.offset(s, 4.0))
            },
            &[1.0, -2.0],
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nan_propagates() {
        let err = finite_difference_check(
            |t: &mut Tape, x: Var| -> R {
                let n = t.constant(vec![f64::NAN], &[1]).unwrap();
                let y = t.mul(x, n)?;
                Ok(t.sum(y))
            },
            &[1.0],
            1e-6,
        )
        .unwrap();
        assert!(err.is_nan());
    }
}
