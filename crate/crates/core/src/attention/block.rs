use crate::differential::{mapwise_apply, select_lambda_map, select_lambdas, tdo_apply, DiffInputs, DifferentialBank};
use crate::error::{Error, Result};
use crate::kernels::{dmk_forward, KernelBank};
use crate::numerics::{Matrix, Real, SeededRng, TokenMatrix};
use crate::projection::{dpm_forward, DpmOutput, ProjectorBank};
use crate::routing::RouteAssignment;

use super::dwc::{dwc_forward, reparam_merge, DwcParams, Grid};

/// Which differential paradigm a block uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Variant {
    /// Difference the tokens, then attend.
    #[default]
    TokenWise,
    /// Attend twice and difference the two outputs.
    MapWise,
}

/// One kernel bank per stream; each has its own router and γ set.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamKernels<T> {
    pub q: KernelBank<T>,
    pub k: KernelBank<T>,
    pub qp: KernelBank<T>,
    pub kp: KernelBank<T>,
}

/// Kernel and differential banks for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub kernels: StreamKernels<T>,
    pub diff: DifferentialBank<T>,
}

impl<T: Real> HeadParams<T> {
    /// Draw order: kernel routers for Q, K, Q′, K′, then the differential
    /// routers for λ^Q, λ^K and λ_map.
    pub fn random(head_dim: usize, n_f: usize, n_d: usize, gamma: T, lambda: T, rng: &mut SeededRng) -> Result<Self> {
        let kernels = StreamKernels {
            q: KernelBank::random(head_dim, n_f, gamma, rng)?,
            k: KernelBank::random(head_dim, n_f, gamma, rng)?,
            qp: KernelBank::random(head_dim, n_f, gamma, rng)?,
            kp: KernelBank::random(head_dim, n_f, gamma, rng)?,
        };
        let diff = DifferentialBank::random(head_dim, n_d, lambda, rng)?;
        Ok(HeadParams { kernels, diff })
    }

    pub fn cast<U: Real>(&self) -> HeadParams<U> {
        let k = &self.kernels;
        HeadParams {
            kernels: StreamKernels {
                q: k.q.cast(),
                k: k.k.cast(),
                qp: k.qp.cast(),
                kp: k.kp.cast(),
            },
            diff: self.diff.cast(),
        }
    }

    fn check_dim(&self, head_dim: usize) -> Result<()> {
        let k = &self.kernels;
        for (name, bank) in [
            ("kernel q", &k.q),
            ("kernel k", &k.k),
            ("kernel qp", &k.qp),
            ("kernel kp", &k.kp),
        ] {
            if bank.router().in_dim() != head_dim {
                return Err(Error::config(
                    name,
                    format!("router width {} != head width {head_dim}", bank.router().in_dim()),
                ));
            }
        }
        if self.diff.token_dim() != head_dim {
            return Err(Error::config(
                "differential",
                format!(
                    "router width {} != 2 × head width {head_dim}",
                    self.diff.router_q.in_dim()
                ),
            ));
        }
        Ok(())
    }
}

/// Shape and initialization settings for drawing a random block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    pub n_p: usize,
    pub n_f: usize,
    pub n_d: usize,
    pub gamma_init: f64,
    pub lambda_init: f64,
    pub grid: Grid,
    /// `None` disables the convolution; `Some(identity_branch)` enables it.
    pub dwc: Option<bool>,
    pub use_merged: bool,
    pub normalize: bool,
    pub variant: Variant,
}

/// Complete parameter set of one DyDiLA block.
#[derive(Clone, Debug, PartialEq)]
pub struct DydilaParams<T> {
    pub projectors: ProjectorBank<T>,
    pub heads: Vec<HeadParams<T>>,
    /// `None` disables the convolution path.
    pub dwc: Option<DwcParams<T>>,
    pub use_merged: bool,
    pub grid: Grid,
    pub normalize: bool,
    pub variant: Variant,
}

impl<T: Real> DydilaParams<T> {
    /// Draws a block from `rng`: projector bank, then each head's banks, then
    /// the convolution kernels (merged up front when `use_merged` is set).
    pub fn random(cfg: &BlockConfig, rng: &mut SeededRng) -> Result<Self> {
        if cfg.heads == 0 || !cfg.d.is_multiple_of(cfg.heads) {
            return Err(Error::config(
                "heads",
                format!("d = {} is not divisible by {} heads", cfg.d, cfg.heads),
            ));
        }
        let projectors = ProjectorBank::random(cfg.d, cfg.n_p, rng)?;
        let head_dim = cfg.d / cfg.heads;
        let heads = (0..cfg.heads)
            .map(|_| {
                HeadParams::random(
                    head_dim,
                    cfg.n_f,
                    cfg.n_d,
                    T::lit(cfg.gamma_init),
                    T::lit(cfg.lambda_init),
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let dwc = cfg.dwc.map(|identity| {
            let dwc = DwcParams::random(cfg.d, identity, rng);
            if cfg.use_merged {
                reparam_merge(&dwc)
            } else {
                dwc
            }
        });
        let params = DydilaParams {
            projectors,
            heads,
            dwc,
            use_merged: cfg.use_merged,
            grid: cfg.grid,
            normalize: cfg.normalize,
            variant: cfg.variant,
        };
        params.validate()?;
        Ok(params)
    }

    /// Same parameters at another precision.
    pub fn cast<U: Real>(&self) -> DydilaParams<U> {
        DydilaParams {
            projectors: self.projectors.cast(),
            heads: self.heads.iter().map(HeadParams::cast).collect(),
            dwc: self.dwc.as_ref().map(DwcParams::cast),
            use_merged: self.use_merged,
            grid: self.grid,
            normalize: self.normalize,
            variant: self.variant,
        }
    }

    pub fn dim(&self) -> usize {
        self.projectors.dim()
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads.len().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let h = self.heads.len();
        if h == 0 || !d.is_multiple_of(h) {
            return Err(Error::config("heads", format!("d = {d} is not divisible by {h} heads")));
        }
        for head in &self.heads {
            head.check_dim(d / h)?;
        }
        if let Some(dwc) = &self.dwc {
            if dwc.channels() != d {
                return Err(Error::config(
                    "dwc",
                    format!("{} kernels for {d} channels", dwc.channels()),
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &TokenMatrix<T>) -> Result<()> {
        self.validate()?;
        if x.cols() != self.dim() {
            return Err(Error::shape("dydila", x.shape(), (x.rows(), self.dim())));
        }
        self.grid.check(x.rows())
    }
}

/// Route assignments and routed factors recorded during one head's pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadDiagnostics<T> {
    /// Kernel routes for Q, K, Q′, K′ in that order.
    pub kernel_routes: [RouteAssignment<T>; 4],
    pub lambda_q: Vec<T>,
    pub lambda_k: Vec<T>,
    pub lambda_routes_q: RouteAssignment<T>,
    pub lambda_routes_k: RouteAssignment<T>,
    /// Present for the map-wise variant only.
    pub lambda_map: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockDiagnostics<T> {
    pub projector_routes_q: RouteAssignment<T>,
    pub projector_routes_k: RouteAssignment<T>,
    pub heads: Vec<HeadDiagnostics<T>>,
}

impl<T: Real> BlockDiagnostics<T> {
    fn mean_over_heads(&self, pick: impl Fn(&HeadDiagnostics<T>) -> Option<&Vec<T>>) -> Option<f64> {
        // Running mean, so equal factors average to exactly that factor.
        let mut mean = 0.0;
        let mut count = 0usize;
        for h in &self.heads {
            for v in pick(h)? {
                count += 1;
                mean += (v.as_f64() - mean) / count as f64;
            }
        }
        (count > 0).then_some(mean)
    }

    /// Mean routed λ^Q over heads and tokens.
    pub fn mean_lambda_q(&self) -> Option<f64> {
        self.mean_over_heads(|h| Some(&h.lambda_q))
    }

    pub fn mean_lambda_k(&self) -> Option<f64> {
        self.mean_over_heads(|h| Some(&h.lambda_k))
    }

    pub fn mean_lambda_map(&self) -> Option<f64> {
        self.mean_over_heads(|h| h.lambda_map.as_ref())
    }
}

/// Kernel-processed streams of one head, ready for the differential.
pub(crate) struct HeadState<T> {
    pub q: TokenMatrix<T>,
    pub qp: TokenMatrix<T>,
    pub k: TokenMatrix<T>,
    pub kp: TokenMatrix<T>,
    pub v: TokenMatrix<T>,
    pub diag: HeadDiagnostics<T>,
}

impl<T: Real> HeadState<T> {
    pub fn inputs(&self) -> DiffInputs<'_, T> {
        DiffInputs {
            q: &self.q,
            qp: &self.qp,
            k: &self.k,
            kp: &self.kp,
            v: &self.v,
        }
    }
}

pub(crate) fn prepare_head<T: Real>(
    raw: [TokenMatrix<T>; 5],
    head: &HeadParams<T>,
    variant: Variant,
) -> Result<HeadState<T>> {
    let [q, k, v, qp, kp] = raw;
    let (q, rq) = dmk_forward(&q, &head.kernels.q)?;
    let (k, rk) = dmk_forward(&k, &head.kernels.k)?;
    let (qp, rqp) = dmk_forward(&qp, &head.kernels.qp)?;
    let (kp, rkp) = dmk_forward(&kp, &head.kernels.kp)?;
    let mut state = HeadState {
        q,
        qp,
        k,
        kp,
        v,
        diag: HeadDiagnostics {
            kernel_routes: [rq, rk, rqp, rkp],
            lambda_q: Vec::new(),
            lambda_k: Vec::new(),
            lambda_routes_q: RouteAssignment {
                indices: Vec::new(),
                logits: Matrix::zeros(0, 0),
            },
            lambda_routes_k: RouteAssignment {
                indices: Vec::new(),
                logits: Matrix::zeros(0, 0),
            },
            lambda_map: None,
        },
    };
    let inputs = state.inputs();
    let qc = inputs.concat_q()?;
    let routed = select_lambdas(&qc, &inputs.concat_k()?, &head.diff)?;
    let lambda_map = match variant {
        Variant::TokenWise => None,
        Variant::MapWise => Some(select_lambda_map(&qc, &head.diff)?.0),
    };
    state.diag.lambda_q = routed.lambda_q;
    state.diag.lambda_k = routed.lambda_k;
    state.diag.lambda_routes_q = routed.routes_q;
    state.diag.lambda_routes_k = routed.routes_k;
    state.diag.lambda_map = lambda_map;
    Ok(state)
}

fn finish_head<T: Real>(state: &HeadState<T>, normalize: bool) -> Result<TokenMatrix<T>> {
    match &state.diag.lambda_map {
        None => tdo_apply(&state.inputs(), &state.diag.lambda_q, &state.diag.lambda_k, normalize),
        Some(lambda_map) => mapwise_apply(&state.inputs(), lambda_map),
    }
}

/// Column slices `[q, k, v, q′, k′]` of `proj` for head `h`.
pub(crate) fn head_slices<T: Real>(proj: &DpmOutput<T>, h: usize, width: usize) -> Result<[TokenMatrix<T>; 5]> {
    let start = h * width;
    Ok([
        proj.q.column_block(start, width)?,
        proj.k.column_block(start, width)?,
        proj.v.column_block(start, width)?,
        proj.qp.column_block(start, width)?,
        proj.kp.column_block(start, width)?,
    ])
}

fn add_dwc<T: Real>(out: TokenMatrix<T>, v: &TokenMatrix<T>, params: &DydilaParams<T>) -> Result<TokenMatrix<T>> {
    match &params.dwc {
        Some(dwc) => out.add(&dwc_forward(v, params.grid, dwc, params.use_merged)?),
        None => Ok(out),
    }
}

/// Single-head block: projection, measure kernels, differential, plus the
/// depth-wise convolution of V. Requires exactly one head.
pub fn dydila_forward<T: Real>(
    x: &TokenMatrix<T>,
    params: &DydilaParams<T>,
) -> Result<(TokenMatrix<T>, BlockDiagnostics<T>)> {
    params.check_input(x)?;
    if params.n_heads() != 1 {
        return Err(Error::config(
            "heads",
            format!(
                "dydila_forward is single-head, got {}; use multihead_forward",
                params.n_heads()
            ),
        ));
    }
    let proj = dpm_forward(x, &params.projectors)?;
    let raw = [
        proj.q.clone(),
        proj.k.clone(),
        proj.v.clone(),
        proj.qp.clone(),
        proj.kp.clone(),
    ];
    let state = prepare_head(raw, &params.heads[0], params.variant)?;
    let out = finish_head(&state, params.normalize)?;
    let out = add_dwc(out, &proj.v, params)?;
    Ok((
        out,
        BlockDiagnostics {
            projector_routes_q: proj.routes_q,
            projector_routes_k: proj.routes_k,
            heads: vec![state.diag],
        },
    ))
}

/// Splits the projected channels into equal head slices, runs the kernel and
/// differential stages per head with that head's banks, concatenates, and adds
/// the convolution of the full-width V.
pub fn multihead_forward<T: Real>(
    x: &TokenMatrix<T>,
    params: &DydilaParams<T>,
) -> Result<(TokenMatrix<T>, BlockDiagnostics<T>)> {
    params.check_input(x)?;
    let proj = dpm_forward(x, &params.projectors)?;
    let width = params.head_dim();
    let mut out = Matrix::zeros(x.rows(), params.dim());
    let mut heads = Vec::with_capacity(params.n_heads());
    for (h, head) in params.heads.iter().enumerate() {
        let state = prepare_head(head_slices(&proj, h, width)?, head, params.variant)?;
        out.set_column_block(h * width, &finish_head(&state, params.normalize)?)?;
        heads.push(state.diag);
    }
    let out = add_dwc(out, &proj.v, params)?;
    Ok((
        out,
        BlockDiagnostics {
            projector_routes_q: proj.routes_q,
            projector_routes_k: proj.routes_k,
            heads,
        },
    ))
}
