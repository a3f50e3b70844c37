use crate::error::{Error, Result};
use crate::kernels::FeatureMap;
use crate::numerics::matrix::{dot, softmax_in_place};
use crate::numerics::{Real, TokenMatrix};
use crate::projection::{dpm_forward, project_shared};

use super::block::{head_slices, prepare_head, DydilaParams};

/// Attention map to read a row from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    /// Softmax over the shared-projected Q and K.
    Softmax,
    /// Normalized ReLU linear attention over the shared-projected Q and K.
    Linear,
    /// The block's own (unnormalized) differential map.
    Dydila,
}

/// Row `query_index` of the effective attention map, one weight per key.
///
/// For [`MapKind::Dydila`] the row is `a_i · b_jᵀ` with `a`, `b` the
/// differenced queries and keys (or `Q̃_i·K̃_j − λ_map,i Q̃′_i·K̃′_j` for the
/// map-wise variant), averaged over heads. Costs `O(N·d)`.
pub fn extract_attention_row<T: Real>(
    params: &DydilaParams<T>,
    x: &TokenMatrix<T>,
    query_index: usize,
    kind: MapKind,
) -> Result<Vec<T>> {
    if query_index >= x.rows() {
        return Err(Error::OutOfBounds {
            what: "query index",
            index: query_index,
            len: x.rows(),
        });
    }
    match kind {
        MapKind::Softmax => {
            let p = project_shared(x, &params.projectors)?;
            let inv_temp = T::one() / T::lit(p.q.cols() as f64).sqrt();
            let qi = p.q.row(query_index);
            let mut row: Vec<T> = p.k.iter_rows().map(|kj| dot(qi, kj) * inv_temp).collect();
            softmax_in_place(&mut row);
            Ok(row)
        }
        MapKind::Linear => {
            let p = project_shared(x, &params.projectors)?;
            let fq = FeatureMap::Relu.apply(&p.q)?;
            let fk = FeatureMap::Relu.apply(&p.k)?;
            let qi = fq.row(query_index);
            let mut row: Vec<T> = fk.iter_rows().map(|kj| dot(qi, kj)).collect();
            let total = row.iter().fold(T::zero(), |s, &v| s + v);
            let den = total.max(T::lit(crate::differential::DENOMINATOR_FLOOR));
            row.iter_mut().for_each(|v| *v = *v / den);
            Ok(row)
        }
        MapKind::Dydila => {
            params.check_input(x)?;
            let proj = dpm_forward(x, &params.projectors)?;
            let width = params.head_dim();
            let mut acc = vec![T::zero(); x.rows()];
            for (h, head) in params.heads.iter().enumerate() {
                let s = prepare_head(head_slices(&proj, h, width)?, head, params.variant)?;
                let i = query_index;
                match &s.diag.lambda_map {
                    None => {
                        let a = s.diag.lambda_q[i];
                        let query: Vec<T> = s.q.row(i).iter().zip(s.qp.row(i)).map(|(&q, &qp)| q - a * qp).collect();
                        for (j, w) in acc.iter_mut().enumerate() {
                            let b = s.diag.lambda_k[j];
                            let key = s.k.row(j).iter().zip(s.kp.row(j));
                            let score = query
                                .iter()
                                .zip(key)
                                .fold(T::zero(), |acc, (&q, (&k, &kp))| acc + q * (k - b * kp));
                            *w = *w + score;
                        }
                    }
                    Some(lambda_map) => {
                        let lm = lambda_map[i];
                        for (j, w) in acc.iter_mut().enumerate() {
                            let main = dot(s.q.row(i), s.k.row(j));
                            let redundant = dot(s.qp.row(i), s.kp.row(j));
                            *w = *w + (main - lm * redundant);
                        }
                    }
                }
            }
            let heads = T::lit(params.n_heads() as f64);
            acc.iter_mut().for_each(|w| *w = *w / heads);
            Ok(acc)
        }
    }
}
