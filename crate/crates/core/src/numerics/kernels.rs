//! Plain slice kernels shared by the forward and backward passes.

/// `c += a[m×k] · b[k×p]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * p..(t + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a[m×k] · b[p×k]ᵀ`
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * p + j] += dot;
        }
    }
}

/// `c += a[k×m]ᵀ · b[k×p]`
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, p: usize) {
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * p..(t + 1) * p];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * p..(i + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU and its derivative.
pub(crate) fn gelu(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, dy)
}

/// In-place row softmax with max subtraction.
pub(crate) fn softmax_rows_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Numerically stable `1 / (1 + e^t)`.
pub(crate) fn logistic_neg(t: f64) -> f64 {
    if t >= 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

#[inline]
pub(crate) fn pos(x: f64) -> f64 {
    x.max(0.0)
}
