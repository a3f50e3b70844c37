//! Brute-force reference implementations.
//!
//! Everything here is written with plain index loops: explicit `N × N`
//! attention maps, per-token routing and kernel loops, and a composed
//! pipeline that chains them. None of it calls the fast paths, so agreement
//! between the two is evidence rather than tautology. Oracles are slow on
//! purpose and refuse inputs above [`DEFAULT_ORACLE_CAP`] tokens.

#![allow(clippy::needless_range_loop)]

use crate::attention::{DydilaParams, Grid, Variant};
use crate::error::{Error, Result};
use crate::kernels::{FeatureMap, KernelBank};
use crate::numerics::{Matrix, Real, TokenMatrix};
use crate::projection::ProjectorBank;
use crate::routing::Router;

pub const DEFAULT_ORACLE_CAP: usize = 256;

/// Magnitudes below this are treated as zero by [`compare`].
pub const RELATIVE_FLOOR: f64 = 1e-30;

/// Outcome of comparing a candidate against a reference.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub max_abs_error: f64,
    /// `max_abs_error / max(max|reference|, 1e-30)`, or zero when the absolute
    /// error itself is below the floor.
    pub max_rel_error: f64,
    /// Location of the largest absolute error when the check fails.
    pub mismatch_location: Option<(usize, usize)>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares two equally shaped matrices at a relative `tolerance`.
pub fn compare<T: Real>(reference: &Matrix<T>, candidate: &Matrix<T>, tolerance: f64) -> Result<OracleReport> {
    if reference.shape() != candidate.shape() {
        return Err(Error::shape("compare", reference.shape(), candidate.shape()));
    }
    let mut max_abs = 0.0f64;
    let mut scale = 0.0f64;
    let mut worst = None;
    let cols = reference.cols().max(1);
    for (idx, (r, c)) in reference.data().iter().zip(candidate.data()).enumerate() {
        let (r, c) = (r.as_f64(), c.as_f64());
        scale = scale.max(r.abs());
        let err = (r - c).abs();
        // NaN never compares greater, so track it explicitly.
        if err > max_abs || (err.is_nan() && !max_abs.is_nan()) {
            max_abs = err;
            worst = Some((idx / cols, idx % cols));
        }
    }
    let max_rel = if max_abs <= RELATIVE_FLOOR {
        0.0
    } else {
        max_abs / scale.max(RELATIVE_FLOOR)
    };
    let pass = max_rel <= tolerance;
    Ok(OracleReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        mismatch_location: if pass { None } else { worst },
        tolerance,
        pass,
    })
}

fn check_cap(n: usize) -> Result<()> {
    if n > DEFAULT_ORACLE_CAP {
        return Err(Error::OracleCap {
            n,
            cap: DEFAULT_ORACLE_CAP,
        });
    }
    Ok(())
}

fn check_same<T: Real>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Triple-loop product.
pub fn naive_matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::shape("naive_matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = T::zero();
            for k in 0..a.cols() {
                s = s + a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    Ok(out)
}

/// Focused kernel written directly from its definition:
/// `relu(z)^γ / ‖relu(z)^γ‖ · ‖relu(z)‖`, zero when `relu(z)` is zero.
pub fn focused_row<T: Real>(z: &[T], gamma: T) -> Vec<T> {
    let r: Vec<T> = z.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    let mut norm_r = T::zero();
    for &v in &r {
        norm_r = norm_r + v * v;
    }
    let norm_r = norm_r.sqrt();
    if norm_r == T::zero() {
        return vec![T::zero(); z.len()];
    }
    let p: Vec<T> = r.iter().map(|&v| v.powf(gamma)).collect();
    let mut norm_p = T::zero();
    for &v in &p {
        norm_p = norm_p + v * v;
    }
    let norm_p = norm_p.sqrt();
    p.iter().map(|&v| v / norm_p * norm_r).collect()
}

fn feature_rows<T: Real>(m: &Matrix<T>, kernel: &FeatureMap<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<T> = match *kernel {
            FeatureMap::Relu => m
                .row(i)
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            FeatureMap::Focused(g) => focused_row(m.row(i), g),
        };
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}

/// `map · v` for an explicit `N × N` map.
fn apply_map<T: Real>(map: &[Vec<T>], v: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(map.len(), v.cols());
    for (i, row) in map.iter().enumerate() {
        for c in 0..v.cols() {
            let mut s = T::zero();
            for (j, &w) in row.iter().enumerate() {
                s = s + w * v.get(j, c);
            }
            out.set(i, c, s);
        }
    }
    out
}

fn dot_loop<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for i in 0..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// Softmax attention through the explicit `N × N` map.
pub fn explicit_softmax_attention<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    check_cap(k.rows())?;
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape("explicit_softmax_attention", q.shape(), k.shape()));
    }
    let temp = T::lit(q.cols() as f64).sqrt();
    let map: Vec<Vec<T>> = (0..q.rows())
        .map(|i| {
            let logits: Vec<T> = (0..k.rows()).map(|j| dot_loop(q.row(i), k.row(j)) / temp).collect();
            let max = logits.iter().fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
            let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
            let mut total = T::zero();
            for &e in &exps {
                total = total + e;
            }
            exps.iter().map(|&e| e / total).collect()
        })
        .collect();
    Ok(apply_map(&map, v))
}

/// Normalized kernel attention through the explicit `φ(Q)φ(K)ᵀ` map.
pub fn explicit_linear_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    kernel: &FeatureMap<T>,
) -> Result<Matrix<T>> {
    check_cap(k.rows())?;
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape("explicit_linear_attention", q.shape(), k.shape()));
    }
    let fq = feature_rows(q, kernel);
    let fk = feature_rows(k, kernel);
    let floor = T::lit(crate::differential::DENOMINATOR_FLOOR);
    let map: Vec<Vec<T>> = (0..q.rows())
        .map(|i| {
            let sims: Vec<T> = (0..k.rows()).map(|j| dot_loop(fq.row(i), fk.row(j))).collect();
            let mut total = T::zero();
            for &s in &sims {
                total = total + s;
            }
            let den = if total > floor { total } else { floor };
            sims.iter().map(|&s| s / den).collect()
        })
        .collect();
    Ok(apply_map(&map, v))
}

fn difference<T: Real>(a: &Matrix<T>, b: &Matrix<T>, lambda: &[T]) -> Matrix<T> {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) - lambda[i] * b.get(i, j))
}

fn check_diff<T: Real>(
    q: &Matrix<T>,
    qp: &Matrix<T>,
    k: &Matrix<T>,
    kp: &Matrix<T>,
    v: &Matrix<T>,
    factors: &[&[T]],
) -> Result<()> {
    check_cap(q.rows())?;
    for m in [qp, k, kp, v] {
        check_same("oracle differential", q, m)?;
    }
    for f in factors {
        if f.len() != q.rows() {
            return Err(Error::Length {
                what: "oracle factors",
                expected: q.rows(),
                got: f.len(),
            });
        }
    }
    Ok(())
}

/// Token-wise differential through the explicit `(Q̃ − λQ̃′)(K̃ − λK̃′)ᵀ` map.
pub fn explicit_tdo<T: Real>(
    q: &Matrix<T>,
    qp: &Matrix<T>,
    k: &Matrix<T>,
    kp: &Matrix<T>,
    v: &Matrix<T>,
    lambda_q: &[T],
    lambda_k: &[T],
) -> Result<Matrix<T>> {
    check_diff(q, qp, k, kp, v, &[lambda_q, lambda_k])?;
    let a = difference(q, qp, lambda_q);
    let b = difference(k, kp, lambda_k);
    let map: Vec<Vec<T>> = (0..a.rows())
        .map(|i| (0..b.rows()).map(|j| dot_loop(a.row(i), b.row(j))).collect())
        .collect();
    Ok(apply_map(&map, v))
}

/// Normalized token-wise differential: row `i` divided by `Σ_j map[i][j]`
/// with magnitude floored at `1e-6`.
pub fn explicit_tdo_normalized<T: Real>(
    q: &Matrix<T>,
    qp: &Matrix<T>,
    k: &Matrix<T>,
    kp: &Matrix<T>,
    v: &Matrix<T>,
    lambda_q: &[T],
    lambda_k: &[T],
) -> Result<Matrix<T>> {
    check_diff(q, qp, k, kp, v, &[lambda_q, lambda_k])?;
    let a = difference(q, qp, lambda_q);
    let b = difference(k, kp, lambda_k);
    let floor = T::lit(crate::differential::DENOMINATOR_FLOOR);
    let map: Vec<Vec<T>> = (0..a.rows())
        .map(|i| {
            let row: Vec<T> = (0..b.rows()).map(|j| dot_loop(a.row(i), b.row(j))).collect();
            let mut total = T::zero();
            for &s in &row {
                total = total + s;
            }
            let den = if total.abs() >= floor {
                total
            } else if total < T::zero() {
                -floor
            } else {
                floor
            };
            row.iter().map(|&s| s / den).collect()
        })
        .collect();
    Ok(apply_map(&map, v))
}

/// Map-wise differential through two explicit maps.
pub fn explicit_mapwise<T: Real>(
    q: &Matrix<T>,
    qp: &Matrix<T>,
    k: &Matrix<T>,
    kp: &Matrix<T>,
    v: &Matrix<T>,
    lambda_map: &[T],
) -> Result<Matrix<T>> {
    check_diff(q, qp, k, kp, v, &[lambda_map])?;
    let map: Vec<Vec<T>> = (0..q.rows())
        .map(|i| {
            (0..k.rows())
                .map(|j| dot_loop(q.row(i), k.row(j)) - lambda_map[i] * dot_loop(qp.row(i), kp.row(j)))
                .collect()
        })
        .collect();
    Ok(apply_map(&map, v))
}

/// Per-token argmax routing, ties to the smallest index.
pub fn route_loop<T: Real>(tokens: &Matrix<T>, router: &Router<T>) -> Vec<usize> {
    let w = router.weights();
    (0..tokens.rows())
        .map(|i| {
            let mut best = 0;
            let mut best_score = T::neg_infinity();
            for c in 0..w.cols() {
                let mut s = T::zero();
                for r in 0..w.rows() {
                    s = s + tokens.get(i, r) * w.get(r, c);
                }
                if c == 0 || s > best_score {
                    best = c;
                    best_score = s;
                }
            }
            best
        })
        .collect()
}

fn project_row<T: Real>(x: &[T], w: &Matrix<T>) -> Vec<T> {
    (0..w.cols())
        .map(|c| {
            let mut s = T::zero();
            for (r, &xv) in x.iter().enumerate() {
                s = s + xv * w.get(r, c);
            }
            s
        })
        .collect()
}

/// Projections `[Q, K, V, Q′, K′]`, one token at a time with the projector
/// each token selects.
pub fn dpm_loop<T: Real>(x: &Matrix<T>, bank: &ProjectorBank<T>) -> [Matrix<T>; 5] {
    let u = route_loop(x, &bank.router_q);
    let v_idx = route_loop(x, &bank.router_k);
    let d = bank.dim();
    let mut outs: [Matrix<T>; 5] = std::array::from_fn(|_| Matrix::zeros(x.rows(), d));
    for i in 0..x.rows() {
        let xi = x.row(i);
        let rows = [
            project_row(xi, &bank.w_q0),
            project_row(xi, &bank.w_k0),
            project_row(xi, &bank.w_v0),
            project_row(xi, &bank.w_q[u[i]]),
            project_row(xi, &bank.w_k[v_idx[i]]),
        ];
        for (m, r) in outs.iter_mut().zip(rows) {
            m.row_mut(i).copy_from_slice(&r);
        }
    }
    outs
}

/// Per-token routed focused kernel.
pub fn dmk_loop<T: Real>(z: &Matrix<T>, bank: &KernelBank<T>) -> Matrix<T> {
    let f = route_loop(z, bank.router());
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let row = focused_row(z.row(i), bank.gammas()[f[i]]);
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}

fn concat_rows<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let d = a.cols();
    Matrix::from_fn(
        a.rows(),
        2 * d,
        |i, j| if j < d { a.get(i, j) } else { b.get(i, j - d) },
    )
}

/// Per-token λ selection from the concatenated pair, through `router`.
pub fn lambdas_loop<T: Real>(primary: &Matrix<T>, redundancy: &Matrix<T>, router: &Router<T>, lambdas: &[T]) -> Vec<T> {
    route_loop(&concat_rows(primary, redundancy), router)
        .into_iter()
        .map(|l| lambdas[l])
        .collect()
}

/// Depth-wise 3×3 convolution with zero padding, written per pixel and channel.
pub fn conv_loop<T: Real>(v: &Matrix<T>, grid: Grid, kernels: &[[T; 9]]) -> Matrix<T> {
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for r in 0..grid.h {
        for c in 0..grid.w {
            for ch in 0..v.cols() {
                let mut s = T::zero();
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (rr, cc) = (r + ky, c + kx);
                        if rr == 0 || cc == 0 || rr > grid.h || cc > grid.w {
                            continue;
                        }
                        s = s + kernels[ch][ky * 3 + kx] * v.get((rr - 1) * grid.w + cc - 1, ch);
                    }
                }
                out.set(r * grid.w + c, ch, s);
            }
        }
    }
    out
}

fn columns<T: Real>(m: &Matrix<T>, start: usize, width: usize) -> Matrix<T> {
    Matrix::from_fn(m.rows(), width, |i, j| m.get(i, start + j))
}

/// Whole block composed from the per-token oracles: projection, kernels,
/// λ routing, explicit-map differential per head, then the branch-form
/// convolution of V.
pub fn block_oracle<T: Real>(x: &TokenMatrix<T>, params: &DydilaParams<T>) -> Result<TokenMatrix<T>> {
    check_cap(x.rows())?;
    params.validate()?;
    let [q, k, v, qp, kp] = dpm_loop(x, &params.projectors);
    let width = params.head_dim();
    let mut out = Matrix::zeros(x.rows(), params.dim());
    for (h, head) in params.heads.iter().enumerate() {
        let s = h * width;
        let (hq, hk, hv, hqp, hkp) = (
            columns(&q, s, width),
            columns(&k, s, width),
            columns(&v, s, width),
            columns(&qp, s, width),
            columns(&kp, s, width),
        );
        let tq = dmk_loop(&hq, &head.kernels.q);
        let tk = dmk_loop(&hk, &head.kernels.k);
        let tqp = dmk_loop(&hqp, &head.kernels.qp);
        let tkp = dmk_loop(&hkp, &head.kernels.kp);
        let lambdas = head.diff.lambdas();
        let head_out = match params.variant {
            Variant::TokenWise => {
                let lq = lambdas_loop(&tq, &tqp, &head.diff.router_q, lambdas);
                let lk = lambdas_loop(&tk, &tkp, &head.diff.router_k, lambdas);
                if params.normalize {
                    explicit_tdo_normalized(&tq, &tqp, &tk, &tkp, &hv, &lq, &lk)?
                } else {
                    explicit_tdo(&tq, &tqp, &tk, &tkp, &hv, &lq, &lk)?
                }
            }
            Variant::MapWise => {
                let lm = lambdas_loop(&tq, &tqp, &head.diff.router_map, lambdas);
                explicit_mapwise(&tq, &tqp, &tk, &tkp, &hv, &lm)?
            }
        };
        for i in 0..x.rows() {
            for j in 0..width {
                out.set(i, s + j, head_out.get(i, j));
            }
        }
    }
    if let Some(dwc) = &params.dwc {
        params_grid_check(params.grid, x.rows())?;
        let conv = conv_loop(&v, params.grid, &dwc.kernels);
        for i in 0..x.rows() {
            for j in 0..params.dim() {
                let mut val = out.get(i, j) + conv.get(i, j);
                if dwc.identity_branch {
                    val = val + v.get(i, j);
                }
                out.set(i, j, val);
            }
        }
    }
    Ok(out)
}

fn params_grid_check(grid: Grid, n: usize) -> Result<()> {
    if grid.h * grid.w != n {
        return Err(Error::shape("oracle grid", (grid.h, grid.w), (n, 1)));
    }
    Ok(())
}
