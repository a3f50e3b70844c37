//! Desk-scale invariant and oracle suite behind `dydila check`.
//!
//! Every check runs on seeded instances small enough for the brute-force
//! oracles (width ≤ 32, at most 64 tokens) and reports a relative error
//! against a tolerance. Route mismatches count as an infinite error.

use std::fmt::Write as _;

use anyhow::Result;
use dydila_core::attention::{
    dwc_forward, multihead_forward, reparam_merge, stack_forward, AttentionStack, DwcParams, DydilaParams, Grid,
};
use dydila_core::differential::{
    expand_tokenwise, mapwise_forward, select_lambda_map, select_lambdas, tdo_apply, tdo_forward, DiffInputs,
    DifferentialBank,
};
use dydila_core::kernels::{dmk_forward, focused_kernel, FeatureMap, KernelBank};
use dydila_core::oracle::{self, compare};
use dydila_core::projection::{dpm_forward, project_shared};
use dydila_core::{attention::linear_attention, attention::softmax_attention};
use dydila_core::{Matrix, Real, SeededRng};

use crate::config::{GridSpec, Precision, RunConfig};

/// Tolerances by precision: (reordered products, identities).
pub fn tolerances(precision: Precision) -> (f64, f64) {
    match precision {
        Precision::F64 => (1e-10, 1e-12),
        Precision::F32 => (1e-4, 1e-4),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.error <= self.tolerance
    }
}

pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(CheckResult::pass)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<26} {:>12} {:>10}  status\n", "check", "rel_error", "tolerance");
        for r in &self.results {
            let _ = writeln!(
                out,
                "{:<26} {:>12.3e} {:>10.1e}  {}",
                r.name,
                r.error,
                r.tolerance,
                if r.pass() { "PASS" } else { "FAIL" }
            );
        }
        let passed = self.results.iter().filter(|r| r.pass()).count();
        let _ = writeln!(out, "{passed}/{} checks passed", self.results.len());
        out
    }
}

/// Shrinks the run config to desk scale, keeping its bank sizes, variant,
/// normalization and convolution settings.
pub fn desk_config(cfg: &RunConfig) -> RunConfig {
    let mut desk = cfg.clone();
    desk.preset = crate::config::Preset::Custom;
    if cfg.d > 32 {
        desk.d = 32;
        desk.heads = (1..=cfg.heads.min(32)).rev().find(|h| 32 % h == 0).unwrap_or(1);
    }
    if cfg.seq_len() > 64 {
        desk.grid = GridSpec { h: 8, w: 8 };
    }
    desk
}

/// Spreads the factors around the configured initial values so that
/// routing decisions change the result.
fn spread_block(cfg: &RunConfig, rng: &mut SeededRng) -> Result<DydilaParams<f64>> {
    let mut block = DydilaParams::random(&cfg.block_config(0), rng)?;
    for head in &mut block.heads {
        let k = &mut head.kernels;
        for bank in [&mut k.q, &mut k.k, &mut k.qp, &mut k.kp] {
            let n = bank.n_factors();
            let gammas = (0..n).map(|i| cfg.gamma_init * (i + 1) as f64 / n as f64).collect();
            *bank = KernelBank::new(gammas, bank.router().clone())?;
        }
        let n = head.diff.n_factors();
        let lambdas = (0..n).map(|i| cfg.lambda_init + 0.05 * i as f64 / n as f64).collect();
        head.diff = DifferentialBank::new(
            lambdas,
            head.diff.router_q.clone(),
            head.diff.router_k.clone(),
            head.diff.router_map.clone(),
        )?;
    }
    Ok(block)
}

fn rel<T: Real>(reference: &Matrix<T>, candidate: &Matrix<T>) -> Result<f64> {
    Ok(compare(reference, candidate, 0.0)?.max_rel_error)
}

fn routes_or_inf(same: bool, err: f64) -> f64 {
    if same {
        err
    } else {
        f64::INFINITY
    }
}

fn checks_at<T: Real>(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let desk = desk_config(cfg);
    let (reorder, identity) = tolerances(cfg.precision);
    let mut rng = SeededRng::new(cfg.seed);
    let n = desk.seq_len();
    let d = desk.d;
    let grid = Grid::new(desk.grid.h, desk.grid.w);
    let x: Matrix<T> = rng.uniform_matrix::<f64>(n, d, 1.0).cast();
    let block64 = spread_block(&desk, &mut rng)?;
    let block: DydilaParams<T> = block64.cast();
    let head = &block.heads[0];
    let dh = block.head_dim();
    let mut out = Vec::new();
    let mut push = |name, error, tolerance| out.push(CheckResult { name, error, tolerance });

    // Baselines.
    let p = project_shared(&x, &block.projectors)?;
    push(
        "softmax_oracle",
        rel(
            &oracle::explicit_softmax_attention(&p.q, &p.k, &p.v)?,
            &softmax_attention(&p.q, &p.k, &p.v)?,
        )?,
        identity,
    );
    let fm = FeatureMap::Focused(T::lit(cfg.gamma_init));
    push(
        "linear_reordering",
        rel(
            &oracle::explicit_linear_attention(&p.q, &p.k, &p.v, &fm)?,
            &linear_attention(&p.q, &p.k, &p.v, &fm)?,
        )?,
        reorder,
    );

    // Routing stages against per-token loops.
    let dpm = dpm_forward(&x, &block.projectors)?;
    let [lq, lk, lv, lqp, lkp] = oracle::dpm_loop(&x, &block.projectors);
    let same = dpm.routes_q.indices == oracle::route_loop(&x, &block.projectors.router_q)
        && dpm.routes_k.indices == oracle::route_loop(&x, &block.projectors.router_k);
    let err = [
        (&lq, &dpm.q),
        (&lk, &dpm.k),
        (&lv, &dpm.v),
        (&lqp, &dpm.qp),
        (&lkp, &dpm.kp),
    ]
    .iter()
    .map(|(r, c)| rel(r, c))
    .collect::<Result<Vec<_>>>()?
    .into_iter()
    .fold(0.0, f64::max);
    push("projection_routing", routes_or_inf(same, err), identity);

    let zq = dpm.q.column_block(0, dh)?;
    let (fq, routes) = dmk_forward(&zq, &head.kernels.q)?;
    let same = routes.indices == oracle::route_loop(&zq, head.kernels.q.router());
    push(
        "kernel_routing",
        routes_or_inf(same, rel(&oracle::dmk_loop(&zq, &head.kernels.q), &fq)?),
        identity,
    );

    let streams: Vec<Matrix<T>> = [
        (&dpm.qp, &head.kernels.qp),
        (&dpm.k, &head.kernels.k),
        (&dpm.kp, &head.kernels.kp),
    ]
    .iter()
    .map(|(z, bank)| Ok(dmk_forward(&z.column_block(0, dh)?, bank)?.0))
    .collect::<Result<_>>()?;
    let (fqp, fk, fkp) = (&streams[0], &streams[1], &streams[2]);
    let v = dpm.v.column_block(0, dh)?;
    let inputs = DiffInputs {
        q: &fq,
        qp: fqp,
        k: fk,
        kp: fkp,
        v: &v,
    };
    let routed = select_lambdas(&inputs.concat_q()?, &inputs.concat_k()?, &head.diff)?;
    let lambdas = head.diff.lambdas();
    let same = routed.lambda_q == oracle::lambdas_loop(&fq, fqp, &head.diff.router_q, lambdas)
        && routed.lambda_k == oracle::lambdas_loop(fk, fkp, &head.diff.router_k, lambdas);
    push("lambda_routing", routes_or_inf(same, 0.0), 0.0);

    // Differential operator.
    let (lam_q, lam_k) = (&routed.lambda_q, &routed.lambda_k);
    let explicit = oracle::explicit_tdo(&fq, fqp, fk, fkp, &v, lam_q, lam_k)?;
    push(
        "tdo_reordering",
        rel(&explicit, &tdo_forward(&inputs, &head.diff)?)?,
        reorder,
    );
    let explicit = oracle::explicit_tdo_normalized(&fq, fqp, fk, fkp, &v, lam_q, lam_k)?;
    push(
        "tdo_normalized_reordering",
        rel(&explicit, &tdo_apply(&inputs, lam_q, lam_k, true)?)?,
        reorder,
    );
    let (lam_map, _) = select_lambda_map(&inputs.concat_q()?, &head.diff)?;
    let explicit = oracle::explicit_mapwise(&fq, fqp, fk, fkp, &v, &lam_map)?;
    push(
        "mapwise_reordering",
        rel(&explicit, &mapwise_forward(&inputs, &head.diff)?)?,
        reorder,
    );
    let direct = tdo_apply(&inputs, lam_q, lam_k, false)?;
    push(
        "expansion_identity",
        rel(&direct, &expand_tokenwise(&inputs, lam_q, lam_k)?.combine()?)?,
        identity,
    );
    let zero = vec![T::zero(); n];
    let numerator = fq.matmul(&fk.matmul_tn(&v)?)?;
    push(
        "zero_lambda_degeneration",
        rel(&numerator, &tdo_apply(&inputs, &zero, &zero, false)?)?,
        identity,
    );

    // Kernel norm preservation and zero rows.
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let width = 1 + i % 32;
        let row: Vec<T> = (0..width).map(|_| T::lit(rng.uniform(2.0))).collect();
        let gamma = T::lit([0.5, 1.0, 3.0, 8.0][i % 4]);
        let out = focused_kernel(&row, gamma)?;
        let norm = |r: &[T]| r.iter().map(|v| v.max(T::zero()).as_f64().powi(2)).sum::<f64>().sqrt();
        let (a, b) = (norm(&row), norm(&out));
        let err = if a == 0.0 {
            if out.iter().all(|v| *v == T::zero()) {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (a - b).abs() / a
        };
        worst = worst.max(err);
    }
    push("kernel_norm", worst, identity);

    // Convolution merge.
    let dwc = reparam_merge(&DwcParams::<f64>::random(d, true, &mut rng)).cast::<T>();
    let vx = &x;
    push(
        "dwc_reparam",
        rel(
            &dwc_forward(vx, grid, &dwc, false)?,
            &dwc_forward(vx, grid, &dwc, true)?,
        )?,
        identity,
    );

    // Whole block against the composed oracle; the fault hook perturbs the
    // fast path's copy only.
    let mut fast = block.clone();
    if cfg.inject_fault {
        let w = &mut fast.projectors.w_v0;
        w.set(0, 0, w.get(0, 0) + T::lit(1e-3));
    }
    let reference = oracle::block_oracle(&x, &block)?;
    push(
        "block_reordering",
        rel(&reference, &multihead_forward(&x, &fast)?.0)?,
        reorder,
    );

    // Permutation equivariance without the convolution.
    let mut plain = block.clone();
    plain.dwc = None;
    let perm = rng.permutation(n);
    let (o, diag) = multihead_forward(&x, &plain)?;
    let (po, pdiag) = multihead_forward(&x.select_rows(&perm)?, &plain)?;
    let same = perm.iter().enumerate().all(|(i, &p)| {
        pdiag.projector_routes_q.indices[i] == diag.projector_routes_q.indices[p]
            && pdiag.heads.iter().zip(&diag.heads).all(|(a, b)| {
                a.lambda_routes_q.indices[i] == b.lambda_routes_q.indices[p]
                    && a.kernel_routes
                        .iter()
                        .zip(&b.kernel_routes)
                        .all(|(x, y)| x.indices[i] == y.indices[p])
            })
    });
    push(
        "permutation_equivariance",
        routes_or_inf(same, rel(&o.select_rows(&perm)?, &po)?),
        identity,
    );

    // Residual stack at desk scale: finite output, one record per block.
    let blocks = (0..desk.blocks)
        .map(|b| DydilaParams::<f64>::random(&desk.block_config(b), &mut rng))
        .collect::<dydila_core::Result<Vec<_>>>()?;
    let stack = AttentionStack::new(blocks)?.cast::<T>();
    let xs: Matrix<T> = rng.uniform_matrix::<f64>(n, d, crate::io::INPUT_BOUND).cast();
    let (so, sdiag) = stack_forward(&xs, &stack)?;
    let ok = so.is_finite() && sdiag.len() == desk.blocks && sdiag.iter().all(|b| b.mean_lambda_q().is_some());
    push("stack_smoke", if ok { 0.0 } else { f64::INFINITY }, 0.0);

    Ok(out)
}

pub fn run_checks(cfg: &RunConfig) -> Result<CheckReport> {
    let results = match cfg.precision {
        Precision::F32 => checks_at::<f32>(cfg)?,
        Precision::F64 => checks_at::<f64>(cfg)?,
    };
    Ok(CheckReport { results })
}
