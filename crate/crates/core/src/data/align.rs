use nalgebra::{DMatrix, SymmetricEigen};

use super::{DataError, EpochSet};

const RIDGE: f64 = 1e-10;

/// Mean of `X Xᵀ / T` over the given trials.
pub fn mean_covariance(set: &EpochSet, trials: &[usize]) -> DMatrix<f64> {
    let (c, t) = (set.n_channels(), set.n_samples());
    let mut r = DMatrix::zeros(c, c);
    for &i in trials {
        let x = DMatrix::from_row_slice(c, t, set.trial(i));
        r += &x * x.transpose();
    }
    r / (t * trials.len().max(1)) as f64
}

fn inv_sqrt(r: &DMatrix<f64>, subject: usize) -> Result<DMatrix<f64>, DataError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NotPositiveDefinite { subject });
    }
    let sym = (r + r.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() <= 0.0 {
        let n = sym.nrows();
        eig = SymmetricEigen::new(sym + DMatrix::identity(n, n) * RIDGE);
    }
    if !(eig.eigenvalues.min() > 0.0) {
        return Err(DataError::NotPositiveDefinite { subject });
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Whitens each subject's trials by the inverse square root of that
/// subject's mean covariance. With `fit_mask`, the covariance uses only
/// trials marked true; all of the subject's trials are transformed.
pub fn euclidean_align(set: &EpochSet, fit_mask: Option<&[bool]>) -> Result<EpochSet, DataError> {
    if let Some(m) = fit_mask {
        if m.len() != set.n_trials() {
            return Err(DataError::Inconsistent(format!("fit mask has {} entries for {} trials", m.len(), set.n_trials())));
        }
    }
    let (c, t) = (set.n_channels(), set.n_samples());
    let mut data = set.data().to_vec();
    for subject in set.subject_ids() {
        let trials = set.subject_trials(subject);
        let fit: Vec<usize> = match fit_mask {
            Some(m) => trials.iter().copied().filter(|&i| m[i]).collect(),
            None => trials.clone(),
        };
        if fit.is_empty() {
            continue;
        }
        let w = inv_sqrt(&mean_covariance(set, &fit), subject)?;
        for &i in &trials {
            let x = DMatrix::from_row_slice(c, t, set.trial(i));
            let y = &w * x;
            let out = &mut data[i * c * t..(i + 1) * c * t];
            for ch in 0..c {
                for n in 0..t {
                    out[ch * t + n] = y[(ch, n)];
                }
            }
        }
    }
    let mut out = set.with_data(data, c, t)?;
    out.provenance = if set.provenance.is_empty() { "ea".into() } else { format!("{}+ea", set.provenance) };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failing_subject_is_named() {
        let data = vec![1.0, f64::NAN, 0.0, 1.0, 2.0, 0.0, 1.0, 1.0];
        let set = EpochSet::new(data, 2, 2, vec![0, 0], vec![5, 5], 1.0, 1).unwrap();
        match euclidean_align(&set, None) {
            Err(DataError::NotPositiveDefinite { subject: 5 }) => {}
            other => panic!("expected a non-PD error, got {other:?}"),
        }
    }

    #[test]
    fn mask_restricts_the_fit() {
        let data = vec![2.0, 0.0, 0.0, 2.0, 5.0, 1.0, -1.0, 3.0];
        let set = EpochSet::new(data, 2, 2, vec![0, 0], vec![0, 0], 1.0, 1).unwrap();
        let a = euclidean_align(&set, Some(&[true, false])).unwrap();
        // First trial has covariance 2·I, so the transform is I/√2.
        let s = 2f64.sqrt();
        for (got, want) in a.data().iter().zip([2.0 / s, 0.0, 0.0, 2.0 / s, 5.0 / s, 1.0 / s, -1.0 / s, 3.0 / s]) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
