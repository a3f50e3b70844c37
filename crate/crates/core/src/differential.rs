//! Token differential operator.
//!
//! Each kernel-processed stream is paired with its redundancy stream, the pair
//! is concatenated per token and routed to one of `n_D` learnable factors λ.
//! The operator then attends with the differenced tokens
//!
//! ```text
//! O = (Q̃ − λ^Q ⊙ Q̃′) · ((K̃ − λ^K ⊙ K̃′)ᵀ · V)
//! ```
//!
//! where `λ ⊙ M` scales row `i` of `M` by `λ[i]`. The product is always
//! evaluated right to left, so no N×N map is formed.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, SeededRng, TokenMatrix};
use crate::routing::{RouteAssignment, Router};

/// Smallest denominator magnitude used by the normalized mode.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Differential factors λ and their routers. The query and key routers read
/// `concat(Q̃, Q̃′)` and `concat(K̃, K̃′)`; the map-wise router reads
/// `concat(Q̃, Q̃′)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferentialBank<T> {
    lambdas: Vec<T>,
    pub router_q: Router<T>,
    pub router_k: Router<T>,
    pub router_map: Router<T>,
}

impl<T: Real> DifferentialBank<T> {
    pub fn new(lambdas: Vec<T>, router_q: Router<T>, router_k: Router<T>, router_map: Router<T>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::config("n_d", "need at least one differential factor"));
        }
        if let Some(i) = lambdas.iter().position(|l| !l.is_finite()) {
            return Err(Error::config(format!("lambda[{i}]"), "must be finite"));
        }
        let in_dim = router_q.in_dim();
        for (name, r) in [
            ("router_q", &router_q),
            ("router_k", &router_k),
            ("router_map", &router_map),
        ] {
            if r.n_choices() != lambdas.len() || r.in_dim() != in_dim || !in_dim.is_multiple_of(2) {
                return Err(Error::config(
                    name,
                    format!(
                        "expected {}x{} with even input width, got {}x{}",
                        in_dim,
                        lambdas.len(),
                        r.in_dim(),
                        r.n_choices()
                    ),
                ));
            }
        }
        Ok(DifferentialBank {
            lambdas,
            router_q,
            router_k,
            router_map,
        })
    }

    /// All factors set to `lambda`; routers for token width `d` (input `2d`).
    pub fn random(d: usize, n_d: usize, lambda: T, rng: &mut SeededRng) -> Result<Self> {
        let router_q = Router::new(rng.weight_matrix(2 * d, n_d))?;
        let router_k = Router::new(rng.weight_matrix(2 * d, n_d))?;
        let router_map = Router::new(rng.weight_matrix(2 * d, n_d))?;
        Self::new(vec![lambda; n_d], router_q, router_k, router_map)
    }

    pub fn lambdas(&self) -> &[T] {
        &self.lambdas
    }

    pub fn n_factors(&self) -> usize {
        self.lambdas.len()
    }

    /// Token width `d` this bank expects (half the router input width).
    pub fn token_dim(&self) -> usize {
        self.router_q.in_dim() / 2
    }

    pub fn cast<U: Real>(&self) -> DifferentialBank<U> {
        DifferentialBank {
            lambdas: self.lambdas.iter().map(|l| U::lit(l.as_f64())).collect(),
            router_q: self.router_q.cast(),
            router_k: self.router_k.cast(),
            router_map: self.router_map.cast(),
        }
    }
}

/// A stream and its redundancy stream side by side (`N × 2d`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatTokens<T>(Matrix<T>);

impl<T: Real> ConcatTokens<T> {
    pub fn new(primary: &TokenMatrix<T>, redundancy: &TokenMatrix<T>) -> Result<Self> {
        if primary.shape() != redundancy.shape() {
            return Err(Error::shape("concat", primary.shape(), redundancy.shape()));
        }
        Ok(ConcatTokens(primary.hcat(redundancy)?))
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn half_width(&self) -> usize {
        self.0.cols() / 2
    }
}

/// Routed per-token factors for the query and key streams.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedLambdas<T> {
    pub lambda_q: Vec<T>,
    pub lambda_k: Vec<T>,
    pub routes_q: RouteAssignment<T>,
    pub routes_k: RouteAssignment<T>,
}

pub fn select_lambdas<T: Real>(
    qc: &ConcatTokens<T>,
    kc: &ConcatTokens<T>,
    bank: &DifferentialBank<T>,
) -> Result<RoutedLambdas<T>> {
    let routes_q = bank.router_q.route(qc.matrix())?;
    let routes_k = bank.router_k.route(kc.matrix())?;
    Ok(RoutedLambdas {
        lambda_q: routes_q.gather(&bank.lambdas),
        lambda_k: routes_k.gather(&bank.lambdas),
        routes_q,
        routes_k,
    })
}

/// Routes `concat(Q̃, Q̃′)` through the map-wise router.
pub fn select_lambda_map<T: Real>(
    qc: &ConcatTokens<T>,
    bank: &DifferentialBank<T>,
) -> Result<(Vec<T>, RouteAssignment<T>)> {
    let routes = bank.router_map.route(qc.matrix())?;
    Ok((routes.gather(&bank.lambdas), routes))
}

/// The five kernel-processed operands of the differential operator.
#[derive(Clone, Copy, Debug)]
pub struct DiffInputs<'a, T> {
    pub q: &'a TokenMatrix<T>,
    pub qp: &'a TokenMatrix<T>,
    pub k: &'a TokenMatrix<T>,
    pub kp: &'a TokenMatrix<T>,
    pub v: &'a TokenMatrix<T>,
}

impl<T: Real> DiffInputs<'_, T> {
    /// Every operand must be `N × d` with the same `N` and `d`.
    pub fn validate(&self) -> Result<()> {
        let shape = self.q.shape();
        for m in [self.qp, self.k, self.kp, self.v] {
            if m.shape() != shape {
                return Err(Error::shape("differential operands", shape, m.shape()));
            }
        }
        Ok(())
    }

    fn check_factors(&self, factors: &[T]) -> Result<()> {
        if factors.len() != self.q.rows() {
            return Err(Error::Length {
                what: "differential factors",
                expected: self.q.rows(),
                got: factors.len(),
            });
        }
        Ok(())
    }

    pub fn concat_q(&self) -> Result<ConcatTokens<T>> {
        ConcatTokens::new(self.q, self.qp)
    }

    pub fn concat_k(&self) -> Result<ConcatTokens<T>> {
        ConcatTokens::new(self.k, self.kp)
    }
}

/// Token-wise differential with explicit factors.
///
/// With `normalize`, row `i` is divided by `a_i · Σ_j b_j` (`a`, `b` the
/// differenced queries and keys), its magnitude floored at
/// [`DENOMINATOR_FLOOR`] with the sign kept.
pub fn tdo_apply<T: Real>(
    inputs: &DiffInputs<'_, T>,
    lambda_q: &[T],
    lambda_k: &[T],
    normalize: bool,
) -> Result<TokenMatrix<T>> {
    inputs.validate()?;
    inputs.check_factors(lambda_q)?;
    inputs.check_factors(lambda_k)?;
    let queries = inputs.q.sub(&inputs.qp.scale_rows(lambda_q)?)?;
    let keys = inputs.k.sub(&inputs.kp.scale_rows(lambda_k)?)?;
    let kv = keys.matmul_tn(inputs.v)?;
    let mut out = queries.matmul(&kv)?;
    if normalize {
        let key_sum = keys.column_sums();
        let floor = T::lit(DENOMINATOR_FLOOR);
        for i in 0..out.rows() {
            let den = queries
                .row(i)
                .iter()
                .zip(&key_sum)
                .fold(T::zero(), |s, (&a, &b)| s + a * b);
            let den = if den.abs() < floor {
                if den < T::zero() {
                    -floor
                } else {
                    floor
                }
            } else {
                den
            };
            out.row_mut(i).iter_mut().for_each(|v| *v = *v / den);
        }
    }
    Ok(out)
}

/// Routes λ^Q and λ^K and applies the unnormalized token-wise differential.
pub fn tdo_forward<T: Real>(inputs: &DiffInputs<'_, T>, bank: &DifferentialBank<T>) -> Result<TokenMatrix<T>> {
    inputs.validate()?;
    let routed = select_lambdas(&inputs.concat_q()?, &inputs.concat_k()?, bank)?;
    tdo_apply(inputs, &routed.lambda_q, &routed.lambda_k, false)
}

/// The four bilinear terms of the token-wise differential.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion<T> {
    /// `Q̃ (K̃ᵀ V)`
    pub term1: TokenMatrix<T>,
    /// `Q̃ ((λ^K ⊙ K̃′)ᵀ V)`
    pub term2: TokenMatrix<T>,
    /// `(λ^Q ⊙ Q̃′) (K̃ᵀ V)`
    pub term3: TokenMatrix<T>,
    /// `(λ^Q ⊙ Q̃′) ((λ^K ⊙ K̃′)ᵀ V)`
    pub term4: TokenMatrix<T>,
}

impl<T: Real> Expansion<T> {
    /// `term1 − term2 − term3 + term4`.
    pub fn combine(&self) -> Result<TokenMatrix<T>> {
        self.term1.sub(&self.term2)?.sub(&self.term3)?.add(&self.term4)
    }
}

pub fn expand_tokenwise<T: Real>(inputs: &DiffInputs<'_, T>, lambda_q: &[T], lambda_k: &[T]) -> Result<Expansion<T>> {
    inputs.validate()?;
    inputs.check_factors(lambda_q)?;
    inputs.check_factors(lambda_k)?;
    let scaled_qp = inputs.qp.scale_rows(lambda_q)?;
    let scaled_kp = inputs.kp.scale_rows(lambda_k)?;
    let kv = inputs.k.matmul_tn(inputs.v)?;
    let kpv = scaled_kp.matmul_tn(inputs.v)?;
    Ok(Expansion {
        term1: inputs.q.matmul(&kv)?,
        term2: inputs.q.matmul(&kpv)?,
        term3: scaled_qp.matmul(&kv)?,
        term4: scaled_qp.matmul(&kpv)?,
    })
}

/// Map-wise differential with explicit factors:
/// `Q̃(K̃ᵀV) − λ_map ⊙ Q̃′(K̃′ᵀV)`.
pub fn mapwise_apply<T: Real>(inputs: &DiffInputs<'_, T>, lambda_map: &[T]) -> Result<TokenMatrix<T>> {
    inputs.validate()?;
    inputs.check_factors(lambda_map)?;
    let main = inputs.q.matmul(&inputs.k.matmul_tn(inputs.v)?)?;
    let redundant = inputs.qp.matmul(&inputs.kp.matmul_tn(inputs.v)?)?;
    main.sub(&redundant.scale_rows(lambda_map)?)
}

/// Routes λ_map on `concat(Q̃, Q̃′)` and applies the map-wise differential.
pub fn mapwise_forward<T: Real>(inputs: &DiffInputs<'_, T>, bank: &DifferentialBank<T>) -> Result<TokenMatrix<T>> {
    inputs.validate()?;
    let (lambda_map, _) = select_lambda_map(&inputs.concat_q()?, bank)?;
    mapwise_apply(inputs, &lambda_map)
}
