//! Raw loops shared by forward and backward passes.

/// `out += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `ta` the buffer `a` is stored `k×m`; with `tb` the buffer `b` is
/// stored `n×k`.
pub(crate) fn gemm(
    out: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    let a_buf;
    let a = if ta {
        a_buf = transpose(a, k, m);
        &a_buf[..]
    } else {
        a
    };
    let b_buf;
    let b = if tb {
        b_buf = transpose(b, n, k);
        &b_buf[..]
    } else {
        b
    };
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Transpose of a row-major `rows×cols` buffer.
pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that map an output index onto `input` under broadcasting
/// (zero along broadcast axes).
pub(crate) fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let own = super::tensor::strides(input);
    let pad = out.len() - input.len();
    (0..out.len())
        .map(|i| if i < pad || input[i - pad] == 1 { 0 } else { own[i - pad] })
        .collect()
}

/// Visits every output position with the matching flat offsets into two
/// strided inputs.
pub(crate) fn for_each_strided2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn for_each_strided(out_shape: &[usize], s: &[usize], mut f: impl FnMut(usize, usize)) {
    let zeros = vec![0; s.len()];
    for_each_strided2(out_shape, s, &zeros, |o, i, _| f(o, i));
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x · Φ(x)`.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let mut plain = vec![0.0; 4];
        gemm(&mut plain, &a, &b, 2, 3, 2, false, false);
        assert_eq!(plain, vec![5.0, 11.0, 14.0, 23.0]);

        let at = transpose(&a, 2, 3);
        let bt = transpose(&b, 3, 2);
        let mut both = vec![0.0; 4];
        gemm(&mut both, &at, &bt, 2, 3, 2, true, true);
        assert_eq!(plain, both);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert_eq!(broadcast_strides(&[3, 1], &[2, 3, 4]), vec![0, 1, 0]);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Φ(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
    }
}
