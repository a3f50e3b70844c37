use crate::differential::DENOMINATOR_FLOOR;
use crate::error::{Error, Result};
use crate::kernels::FeatureMap;
use crate::numerics::matrix::{axpy, dot, softmax_in_place};
use crate::numerics::{Matrix, Real, TokenMatrix};
use crate::par;

fn check_qkv<T: Real>(op: &'static str, q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape(op, q.shape(), k.shape()));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(op, k.shape(), v.shape()));
    }
    Ok(())
}

/// Quadratic softmax attention with temperature `1/√d`.
///
/// Rows are processed one at a time so memory stays `O(N)` per worker, but
/// the work is the full `N × N` map.
pub fn softmax_attention<T: Real>(
    q: &TokenMatrix<T>,
    k: &TokenMatrix<T>,
    v: &TokenMatrix<T>,
) -> Result<TokenMatrix<T>> {
    check_qkv("softmax_attention", q, k, v)?;
    let inv_temp = T::one() / T::lit(q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    par::for_each_row_mut(out.data_mut(), v.cols(), |i, o| {
        let qi = q.row(i);
        let mut weights: Vec<T> = k.iter_rows().map(|kj| dot(qi, kj) * inv_temp).collect();
        softmax_in_place(&mut weights);
        for (j, &w) in weights.iter().enumerate() {
            axpy(w, v.row(j), o);
        }
    });
    Ok(out)
}

/// Kernelized linear attention evaluated as `φ(Q)(φ(K)ᵀV)`, each row divided
/// by `φ(Q_i)·Σ_m φ(K_m)` floored at `1e-6`.
pub fn linear_attention<T: Real>(
    q: &TokenMatrix<T>,
    k: &TokenMatrix<T>,
    v: &TokenMatrix<T>,
    kernel: &FeatureMap<T>,
) -> Result<TokenMatrix<T>> {
    check_qkv("linear_attention", q, k, v)?;
    let fq = kernel.apply(q)?;
    let fk = kernel.apply(k)?;
    let kv = fk.matmul_tn(v)?;
    let key_sum = fk.column_sums();
    let floor = T::lit(DENOMINATOR_FLOOR);
    let mut out = fq.matmul(&kv)?;
    par::for_each_row_mut(out.data_mut(), v.cols(), |i, o| {
        let den = dot(fq.row(i), &key_sum).max(floor);
        o.iter_mut().for_each(|x| *x = *x / den);
    });
    Ok(out)
}
