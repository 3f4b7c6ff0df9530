use super::{Tape, Tensor, TensorError, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input, flat index) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` records its computation on the given tape from the leaf handles and
/// returns a scalar. The step for coordinate `x` is `1e-5 · max(1, |x|)` and
/// the error is `|a − n| / max(1, |a|, |n|)`. The unperturbed point is
/// evaluated twice and any mismatch is reported as non-determinism.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::NotScalar { shape: v.shape().to_vec() });
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let first = tape.value(out).item();
    let grads = tape.backward(out)?;

    let second = eval(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheck { max_rel_err: 0.0, worst: (0, 0), coordinates: 0 };
    for (i, v) in vars.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let analytic = grads.get(*v).map_or(0.0, |g| g.data()[j]);
            let x = inputs[i].data()[j];
            let h = 1e-5 * x.abs().max(1.0);
            work[i].data_mut()[j] = x + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.scale(v[0], 3.0)?;
                t.sum(s)
            },
            &[x],
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn softmax_composition() {
        let mut rng = RngStream::new(4, 4);
        let x = Tensor::from_fn(&[2, 5], |_| rng.normal(0.0, 1.0));
        let w = Tensor::from_fn(&[2, 5], |_| rng.normal(0.0, 1.0));
        let r = grad_check(
            |t, v| {
                let s = t.softmax(v[0], -1)?;
                let m = t.mul(s, v[1])?;
                t.sum(m)
            },
            &[x, w],
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn frozen_dropout_mask_is_deterministic() {
        let x = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let g = t.gelu(v[0])?;
                let d = t.dropout_with_mask(g, vec![0.0, 2.0, 2.0, 0.0])?;
                t.sum(d)
            },
            &[x],
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let r = grad_check(
            |t, v| {
                calls.set(calls.get() + 1.0);
                let s = t.scale(v[0], calls.get())?;
                t.sum(s)
            },
            &[x],
        );
        assert!(matches!(r, Err(TensorError::NonDeterministic { .. })));
    }
}
