//! Norm-preserving focused kernel and the routed measure kernel.
//!
//! The focused kernel raises the ReLU of a token to an elementwise power γ and
//! rescales the result back to the ReLU's Euclidean norm. Larger γ pulls the
//! direction toward the dominant coordinates without changing magnitude. The
//! measure kernel routes every token to one of `n_F` learnable γ values.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, SeededRng, TokenMatrix};
use crate::par;
use crate::routing::{RouteAssignment, Router};

/// Applies the focused kernel to one token.
///
/// A token whose ReLU is all zero maps to the zero vector.
pub fn focused_kernel<T: Real>(row: &[T], gamma: T) -> Result<Vec<T>> {
    check_gamma(gamma, 0)?;
    let mut out = vec![T::zero(); row.len()];
    focused_kernel_into(row, gamma, &mut out);
    Ok(out)
}

fn check_gamma<T: Real>(gamma: T, index: usize) -> Result<()> {
    if gamma <= T::zero() || !gamma.is_finite() {
        return Err(Error::config(
            format!("gamma[{index}]"),
            format!("kernel factor must be finite and positive, got {gamma}"),
        ));
    }
    Ok(())
}

// Powers are taken on the ReLU divided by its maximum, so the largest entry is
// exactly 1 and large γ can neither overflow nor flush the row to zero.
pub(crate) fn focused_kernel_into<T: Real>(row: &[T], gamma: T, out: &mut [T]) {
    let peak = row.iter().fold(T::zero(), |m, &v| m.max(v));
    if peak <= T::zero() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut unit_sq = T::zero();
    let mut pow_sq = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let s = v.max(T::zero()) / peak;
        let p = s.powf(gamma);
        unit_sq = unit_sq + s * s;
        pow_sq = pow_sq + p * p;
        *o = p;
    }
    let scale = peak * unit_sq.sqrt() / pow_sq.sqrt();
    out.iter_mut().for_each(|o| *o = *o * scale);
}

/// Fixed feature map for the vanilla linear-attention baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureMap<T> {
    Relu,
    Focused(T),
}

impl<T: Real> FeatureMap<T> {
    pub fn apply(&self, z: &TokenMatrix<T>) -> Result<TokenMatrix<T>> {
        match *self {
            FeatureMap::Relu => Ok(z.relu()),
            FeatureMap::Focused(gamma) => {
                check_gamma(gamma, 0)?;
                let mut out = Matrix::zeros(z.rows(), z.cols());
                par::for_each_row_mut(out.data_mut(), z.cols(), |i, o| focused_kernel_into(z.row(i), gamma, o));
                Ok(out)
            }
        }
    }
}

/// Learnable kernel factors γ and the router choosing among them.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<T> {
    gammas: Vec<T>,
    router: Router<T>,
}

impl<T: Real> KernelBank<T> {
    pub fn new(gammas: Vec<T>, router: Router<T>) -> Result<Self> {
        if gammas.is_empty() {
            return Err(Error::config("n_f", "need at least one kernel factor"));
        }
        for (i, &g) in gammas.iter().enumerate() {
            check_gamma(g, i)?;
        }
        if router.n_choices() != gammas.len() {
            return Err(Error::config(
                "kernel router",
                format!("{} choices for {} factors", router.n_choices(), gammas.len()),
            ));
        }
        Ok(KernelBank { gammas, router })
    }

    /// All factors set to `gamma`, router drawn from `rng`.
    pub fn random(d: usize, n_f: usize, gamma: T, rng: &mut SeededRng) -> Result<Self> {
        let router = Router::new(rng.weight_matrix(d, n_f))?;
        Self::new(vec![gamma; n_f], router)
    }

    pub fn gammas(&self) -> &[T] {
        &self.gammas
    }

    pub fn router(&self) -> &Router<T> {
        &self.router
    }

    pub fn n_factors(&self) -> usize {
        self.gammas.len()
    }

    pub fn cast<U: Real>(&self) -> KernelBank<U> {
        KernelBank {
            gammas: self.gammas.iter().map(|g| U::lit(g.as_f64())).collect(),
            router: self.router.cast(),
        }
    }
}

/// Routes every token of `z` to a kernel factor and applies that kernel.
pub fn dmk_forward<T: Real>(z: &TokenMatrix<T>, bank: &KernelBank<T>) -> Result<(TokenMatrix<T>, RouteAssignment<T>)> {
    let routes = bank.router.route(z)?;
    let mut out = Matrix::zeros(z.rows(), z.cols());
    par::for_each_row_mut(out.data_mut(), z.cols(), |i, o| {
        focused_kernel_into(z.row(i), bank.gammas[routes.indices[i]], o)
    });
    Ok((out, routes))
}
