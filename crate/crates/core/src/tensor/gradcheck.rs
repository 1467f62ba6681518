//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between tape gradients and central
/// differences over every entry of every leaf.
///
/// `f` builds a scalar from the leaves it is handed; it is re-run on a fresh
/// tape for each perturbed evaluation.
pub fn check_gradients<F>(mut f: F, leaves: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        if !tape.item(root).is_finite() {
            return Err(Error::Numerical("gradient check: non-finite function value".into()));
        }
        let mut g = tape.backward(root)?;
        vars.iter()
            .map(|v| g.take(*v).expect("leaf gradient"))
            .collect::<Vec<_>>()
    };

    let mut eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let y = tape.item(root);
        if !y.is_finite() {
            return Err(Error::Numerical("gradient check: non-finite function value".into()));
        }
        Ok(y)
    };

    let mut worst: f64 = 0.0;
    let mut work = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for k in 0..leaf.len() {
            let x0 = leaf.data()[k];
            work[li].data_mut()[k] = x0 + eps;
            let fp = eval(&work)?;
            work[li].data_mut()[k] = x0 - eps;
            let fm = eval(&work)?;
            work[li].data_mut()[k] = x0;
            let cd = (fp - fm) / (2.0 * eps);
            let a = analytic[li].data()[k];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            worst = worst.max(rel);
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
        let v = tape.param(x.clone());
        let sq = tape.square(v);
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
        let err = check_gradients(
            |t, v| {
                let sq = t.square(v[0]);
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let c = tape.scalar(5.0);
        let y = tape.mul(v, v).map(|_| c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|d| *d == 0.0));
        let err = check_gradients(|t, _| Ok(t.scalar(5.0)), &[x], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_value_is_reported() {
        let x = Tensor::vector(vec![-1.0]);
        let r = check_gradients(
            |t, v| {
                let l = t.ln(v[0]);
                Ok(t.sum(l))
            },
            &[x],
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
