//! Raw f64 kernels shared by the tape forward pass, its backward rules and
//! the plain (tape-free) tensor helpers. All loops are sequential with a
//! fixed summation order so repeated runs are bit-identical.

/// C[m,n] += A[m,k] * B[k,n], row-major.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C[m,k] += G[m,n] * B[k,n]^T  (i.e. dA for C = A*B).
pub fn matmul_bt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&g_v, &b_v) in g_row.iter().zip(b_row) {
                s += g_v * b_v;
            }
            c_row[p] += s;
        }
    }
}

/// C[k,n] += A[m,k]^T * G[m,n]  (i.e. dB for C = A*B).
pub fn matmul_at_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_v, &g_v) in c_row.iter_mut().zip(g_row) {
                *c_v += a_ip * g_v;
            }
        }
    }
}

/// Kronecker product of A[m,n] and B[p,q] into C[m*p, n*q].
pub fn kron(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p * n * q];
    let out_cols = n * q;
    for i in 0..m {
        for j in 0..n {
            let a_ij = a[i * n + j];
            for s in 0..p {
                let c_row = (i * p + s) * out_cols + j * q;
                let b_row = s * q;
                for t in 0..q {
                    c[c_row + t] = a_ij * b[b_row + t];
                }
            }
        }
    }
    c
}

/// GELU in its exact erf form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx of the exact-erf GELU.
pub fn gelu_grad(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)) + x * phi
}

/// Max-subtracted softmax over contiguous rows of length `len`, in place.
pub fn softmax_rows(data: &mut [f64], len: usize) {
    debug_assert_eq!(data.len() % len, 0);
    for row in data.chunks_mut(len) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
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
