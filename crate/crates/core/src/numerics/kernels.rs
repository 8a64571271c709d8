//! Dense inner loops. All reductions run in a fixed sequential order so every
//! result is reproducible bit-for-bit; the `i-k-j` loop shape lets the compiler
//! vectorize across output columns without reassociating any sum.

use super::Scalar;

const TR: usize = 4;
const TC: usize = 16;

/// `out[m×n] = a[m×k] · b[k×n]`
///
/// Register-tiled over `TR × TC` output blocks; every output element still
/// sums its `k` products in ascending order, so tiling never changes bits.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = F::zero());
    let mut i0 = 0;
    while i0 < m {
        let ir = TR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let jc = TC.min(n - j0);
            if ir == TR && jc == TC {
                let a0 = &a[i0 * k..(i0 + 1) * k];
                let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
                let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
                let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
                let (mut c0, mut c1, mut c2, mut c3) =
                    ([F::zero(); TC], [F::zero(); TC], [F::zero(); TC], [F::zero(); TC]);
                for p in 0..k {
                    let br: &[F; TC] = b[p * n + j0..p * n + j0 + TC].try_into().expect("tile");
                    let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
                    for c in 0..TC {
                        c0[c] += x0 * br[c];
                        c1[c] += x1 * br[c];
                        c2[c] += x2 * br[c];
                        c3[c] += x3 * br[c];
                    }
                }
                for (r, row) in [c0, c1, c2, c3].iter().enumerate() {
                    out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TC].copy_from_slice(row);
                }
            } else {
                for i in i0..i0 + ir {
                    let o = &mut out[i * n + j0..i * n + j0 + jc];
                    for p in 0..k {
                        let av = a[i * k + p];
                        for (ov, &bv) in o.iter_mut().zip(&b[p * n + j0..p * n + j0 + jc]) {
                            *ov += av * bv;
                        }
                    }
                }
            }
            j0 += jc;
        }
        i0 += ir;
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let mut p0 = 0;
    while p0 < k {
        let pr = TR.min(k - p0);
        let mut j0 = 0;
        while j0 < n {
            let jc = TC.min(n - j0);
            if pr == TR && jc == TC {
                let mut acc = [[F::zero(); TC]; TR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(p0 + r) * n + j0..(p0 + r) * n + j0 + TC]);
                }
                for i in 0..m {
                    let br: &[F; TC] = b[i * n + j0..i * n + j0 + TC].try_into().expect("tile");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[i * k + p0 + r];
                        for (o, &bv) in row.iter_mut().zip(br) {
                            *o += av * bv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(p0 + r) * n + j0..(p0 + r) * n + j0 + TC].copy_from_slice(row);
                }
            } else {
                for p in p0..p0 + pr {
                    let o = &mut out[p * n + j0..p * n + j0 + jc];
                    for i in 0..m {
                        let av = a[i * k + p];
                        for (ov, &bv) in o.iter_mut().zip(&b[i * n + j0..i * n + j0 + jc]) {
                            *ov += av * bv;
                        }
                    }
                }
            }
            j0 += jc;
        }
        p0 += pr;
    }
}

/// `out[m×k] = a[m×n] · b[k×n]ᵀ`
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul(a, &bt, out, m, n, k);
}

pub fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    if max == F::neg_infinity() {
        row.iter_mut().for_each(|v| *v = F::zero());
        return;
    }
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = F::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}
