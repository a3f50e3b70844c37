//! Dynamic projection: shared Q/K/V projectors plus routed token-specific
//! projectors for the redundancy streams Q′ and K′.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, SeededRng, TokenMatrix};
use crate::routing::{RouteAssignment, Router};

/// Shared projectors, `n_P` token-specific projectors per stream and the two
/// routers that pick among them. All weights are `d × d`; no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorBank<T> {
    pub w_q0: Matrix<T>,
    pub w_k0: Matrix<T>,
    pub w_v0: Matrix<T>,
    pub w_q: Vec<Matrix<T>>,
    pub w_k: Vec<Matrix<T>>,
    pub router_q: Router<T>,
    pub router_k: Router<T>,
}

impl<T: Real> ProjectorBank<T> {
    pub fn new(
        shared: [Matrix<T>; 3],
        w_q: Vec<Matrix<T>>,
        w_k: Vec<Matrix<T>>,
        router_q: Router<T>,
        router_k: Router<T>,
    ) -> Result<Self> {
        let [w_q0, w_k0, w_v0] = shared;
        let d = w_q0.rows();
        let square = |m: &Matrix<T>| m.shape() == (d, d);
        if d == 0 || ![&w_q0, &w_k0, &w_v0].into_iter().all(square) {
            return Err(Error::config("projectors", "shared weights must be square d×d"));
        }
        if w_q.is_empty() || w_q.len() != w_k.len() {
            return Err(Error::config(
                "n_p",
                format!("need n_P ≥ 1 matching projectors, got {} and {}", w_q.len(), w_k.len()),
            ));
        }
        if !w_q.iter().chain(&w_k).all(square) {
            return Err(Error::config("projectors", "token-specific weights must be d×d"));
        }
        for (name, r) in [("router_q", &router_q), ("router_k", &router_k)] {
            if r.in_dim() != d || r.n_choices() != w_q.len() {
                return Err(Error::config(
                    name,
                    format!("expected {}x{}, got {}x{}", d, w_q.len(), r.in_dim(), r.n_choices()),
                ));
            }
        }
        Ok(ProjectorBank {
            w_q0,
            w_k0,
            w_v0,
            w_q,
            w_k,
            router_q,
            router_k,
        })
    }

    /// Draws every weight from `rng` with `±1/√d` bounds, in field order.
    pub fn random(d: usize, n_p: usize, rng: &mut SeededRng) -> Result<Self> {
        let shared = [
            rng.weight_matrix(d, d),
            rng.weight_matrix(d, d),
            rng.weight_matrix(d, d),
        ];
        let w_q = (0..n_p).map(|_| rng.weight_matrix(d, d)).collect();
        let w_k = (0..n_p).map(|_| rng.weight_matrix(d, d)).collect();
        let router_q = Router::new(rng.weight_matrix(d, n_p))?;
        let router_k = Router::new(rng.weight_matrix(d, n_p))?;
        Self::new(shared, w_q, w_k, router_q, router_k)
    }

    pub fn dim(&self) -> usize {
        self.w_q0.rows()
    }

    pub fn n_projectors(&self) -> usize {
        self.w_q.len()
    }

    pub fn cast<U: Real>(&self) -> ProjectorBank<U> {
        ProjectorBank {
            w_q0: self.w_q0.cast(),
            w_k0: self.w_k0.cast(),
            w_v0: self.w_v0.cast(),
            w_q: self.w_q.iter().map(Matrix::cast).collect(),
            w_k: self.w_k.iter().map(Matrix::cast).collect(),
            router_q: self.router_q.cast(),
            router_k: self.router_k.cast(),
        }
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::shape("projection", x.shape(), self.w_q0.shape()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedProjection<T> {
    pub q: TokenMatrix<T>,
    pub k: TokenMatrix<T>,
    pub v: TokenMatrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpmOutput<T> {
    pub q: TokenMatrix<T>,
    pub k: TokenMatrix<T>,
    pub v: TokenMatrix<T>,
    pub qp: TokenMatrix<T>,
    pub kp: TokenMatrix<T>,
    pub routes_q: RouteAssignment<T>,
    pub routes_k: RouteAssignment<T>,
}

pub fn project_shared<T: Real>(x: &TokenMatrix<T>, bank: &ProjectorBank<T>) -> Result<SharedProjection<T>> {
    bank.check_input(x)?;
    Ok(SharedProjection {
        q: x.matmul(&bank.w_q0)?,
        k: x.matmul(&bank.w_k0)?,
        v: x.matmul(&bank.w_v0)?,
    })
}

/// Shared projections plus `Q′_i = X_i W^Q_{u_i}` and `K′_i = X_i W^K_{v_i}`.
pub fn dpm_forward<T: Real>(x: &TokenMatrix<T>, bank: &ProjectorBank<T>) -> Result<DpmOutput<T>> {
    let SharedProjection { q, k, v } = project_shared(x, bank)?;
    let routes_q = bank.router_q.route(x)?;
    let routes_k = bank.router_k.route(x)?;
    let qp = routed_projection(x, &routes_q, &bank.w_q)?;
    let kp = routed_projection(x, &routes_k, &bank.w_k)?;
    Ok(DpmOutput {
        q,
        k,
        v,
        qp,
        kp,
        routes_q,
        routes_k,
    })
}

/// Gathers the tokens routed to each projector, runs one matmul per
/// projector and scatters the rows back into token order.
fn routed_projection<T: Real>(
    x: &TokenMatrix<T>,
    routes: &RouteAssignment<T>,
    projectors: &[Matrix<T>],
) -> Result<TokenMatrix<T>> {
    let mut out = Matrix::zeros(x.rows(), projectors[0].cols());
    for (choice, tokens) in routes.groups().iter().enumerate() {
        if tokens.is_empty() {
            continue;
        }
        let projected = x.select_rows(tokens)?.matmul(&projectors[choice])?;
        for (r, &t) in tokens.iter().enumerate() {
            out.row_mut(t).copy_from_slice(projected.row(r));
        }
    }
    Ok(out)
}
