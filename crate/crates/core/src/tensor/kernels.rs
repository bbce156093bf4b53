//! Inner loops. All matrices are row-major slices.

use super::Scalar;

/// c[m,n] += a[m,k] · b[k,n]
pub(super) fn gemm_nn<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &b) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * b;
            }
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub(super) fn gemm_nt<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub(super) fn gemm_tn<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == F::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c, &b) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * b;
            }
        }
    }
}

pub(super) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// In-place softmax of one row at a temperature; subtracts the row max first.
pub(super) fn softmax_row<F: Scalar>(row: &mut [F], temperature: F) {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(super) fn gelu<F: Scalar>(x: F) -> F {
    let k = F::lit(GELU_K);
    let c = F::lit(GELU_C);
    let half = F::lit(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

pub(super) fn gelu_grad<F: Scalar>(x: F) -> F {
    let k = F::lit(GELU_K);
    let c = F::lit(GELU_C);
    let half = F::lit(0.5);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let d_inner = k * (F::one() + F::lit(3.0) * c * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * d_inner
}
