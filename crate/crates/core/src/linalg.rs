//! Dense row-major matrix kernels shared by the typed ops and the tape.

/// `op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// With `trans_a` the buffer `a` holds a `k × m` matrix, with `trans_b` the
/// buffer `b` holds an `n × k` matrix.
pub(crate) fn matmul(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    for (o, &bv) in row.iter_mut().zip(&b[l * n..(l + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let br = &b[j * k..(j + 1) * k];
                    out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                }
            }
        }
        (true, false) => {
            for l in 0..k {
                let ar = &a[l * m..(l + 1) * m];
                let br = &b[l * n..(l + 1) * n];
                for (i, &av) in ar.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for l in 0..k {
                        s += a[l * m + i] * b[j * k + l];
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
    out
}

/// Row-wise softmax of `beta * x` over rows of length `n`, max-subtracted.
pub(crate) fn softmax_rows(x: &[f64], n: usize, beta: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (beta * (v - mx)).exp();
            z += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= z;
        }
    }
    out
}

/// Divides every row by its L2 norm floored at `eps`. Returns the
/// normalized rows and the unfloored norms.
pub(crate) fn normalize_rows(x: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / d);
    for row in x.chunks_exact(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = n.max(eps);
        out.extend(row.iter().map(|v| v / s));
        norms.push(n);
    }
    (out, norms)
}
