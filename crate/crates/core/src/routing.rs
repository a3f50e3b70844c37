//! Hard argmax token routing.
//!
//! One mechanism serves three banks: projectors (Q′/K′ streams), kernel
//! factors γ and differential factors λ. Each token is scored against every
//! choice with a bias-free linear map and sent to the highest-scoring one.
//! Indices are 0-based; ties go to the smallest index.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::par;

/// Linear scorer of shape `in_dim × n_choices`.
#[derive(Clone, Debug, PartialEq)]
pub struct Router<T> {
    weights: Matrix<T>,
}

impl<T: Real> Router<T> {
    pub fn new(weights: Matrix<T>) -> Result<Self> {
        if weights.cols() == 0 {
            return Err(Error::config("router", "needs at least one choice"));
        }
        if weights.rows() == 0 {
            return Err(Error::config("router", "input dimension must be positive"));
        }
        Ok(Router { weights })
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_choices(&self) -> usize {
        self.weights.cols()
    }

    pub fn route(&self, tokens: &Matrix<T>) -> Result<RouteAssignment<T>> {
        route_argmax(tokens, self)
    }

    pub fn cast<U: Real>(&self) -> Router<U> {
        Router {
            weights: self.weights.cast(),
        }
    }
}

/// Per-token choice indices plus the logits they were read from.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteAssignment<T> {
    pub indices: Vec<usize>,
    pub logits: Matrix<T>,
}

impl<T: Real> RouteAssignment<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_choices(&self) -> usize {
        self.logits.cols()
    }

    /// Number of tokens sent to each choice.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_choices()];
        for &i in &self.indices {
            counts[i] += 1;
        }
        counts
    }

    /// Most frequently selected choice (smallest index on ties).
    pub fn most_frequent(&self) -> usize {
        argmax_by(&self.histogram(), |a, b| a > b)
    }

    /// Token indices grouped by the choice they were routed to.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_choices()];
        for (token, &choice) in self.indices.iter().enumerate() {
            groups[choice].push(token);
        }
        groups
    }

    /// `token_index,choice_index` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token_index,choice_index\n");
        for (t, c) in self.indices.iter().enumerate() {
            let _ = writeln!(out, "{t},{c}");
        }
        out
    }

    /// Picks `values[indices[i]]` for every token.
    pub fn gather<V: Copy>(&self, values: &[V]) -> Vec<V> {
        self.indices.iter().map(|&i| values[i]).collect()
    }
}

/// Scores `tokens` with `router` and takes the row-wise argmax.
pub fn route_argmax<T: Real>(tokens: &Matrix<T>, router: &Router<T>) -> Result<RouteAssignment<T>> {
    if tokens.cols() != router.in_dim() {
        return Err(Error::shape("route_argmax", tokens.shape(), router.weights.shape()));
    }
    let logits = tokens.matmul(&router.weights)?;
    let indices = par::map_indices(logits.rows(), |i| argmax_by(logits.row(i), |a, b| a > b));
    Ok(RouteAssignment { indices, logits })
}

fn argmax_by<V: Copy>(values: &[V], greater: impl Fn(V, V) -> bool) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if greater(v, values[best]) {
            best = j;
        }
    }
    best
}
