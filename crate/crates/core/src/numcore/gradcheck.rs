use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// max over coordinates of |analytic - numeric| / (|numeric| + 1e-8)
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Distance of the evaluation point to the nearest recorded kink.
    pub kink_distance: f64,
}

/// Compares the tape gradient of scalar `f` at `point` with central differences.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    if !tape.value(y).is_scalar() {
        return Err(Error::NonScalarLoss(tape.value(y).shape().to_vec()));
    }
    let analytic = tape.backward(y)?.get(x);
    let kink_distance = tape.kink_distance();

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p.clone());
        let y = f(&mut t, x)?;
        Ok(t.scalar(y))
    };

    let mut worst = (0.0_f64, 0usize);
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheck { max_rel_error: worst.0, worst_index: worst.1, kink_distance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic() {
        let p = Tensor::row(vec![0.3, -1.7, 2.2, 0.9]);
        let r = grad_check(
            |t, w| {
                let m = t.mul(w, w)?;
                Ok(t.sum(m))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }
}
