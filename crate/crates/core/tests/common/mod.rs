#![allow(dead_code)]

use dydila_core::attention::{BlockConfig, DydilaParams, Grid, Variant};
use dydila_core::{Matrix, SeededRng};

pub fn block_config(d: usize, heads: usize, grid: Grid) -> BlockConfig {
    BlockConfig {
        d,
        heads,
        n_p: 3,
        n_f: 9,
        n_d: 9,
        gamma_init: 3.0,
        lambda_init: 0.01,
        grid,
        dwc: Some(true),
        use_merged: false,
        normalize: false,
        variant: Variant::TokenWise,
    }
}

/// Random block whose γ and λ values are spread out so routing matters.
pub fn varied_block(cfg: &BlockConfig, rng: &mut SeededRng) -> DydilaParams<f64> {
    let mut params = DydilaParams::random(cfg, rng).unwrap();
    for head in &mut params.heads {
        let k = &mut head.kernels;
        for bank in [&mut k.q, &mut k.k, &mut k.qp, &mut k.kp] {
            let gammas: Vec<f64> = (0..bank.n_factors()).map(|i| 0.5 + 0.75 * i as f64).collect();
            *bank = dydila_core::kernels::KernelBank::new(gammas, bank.router().clone()).unwrap();
        }
        let lambdas: Vec<f64> = (0..head.diff.n_factors()).map(|_| rng.uniform(0.5)).collect();
        head.diff = dydila_core::differential::DifferentialBank::new(
            lambdas,
            head.diff.router_q.clone(),
            head.diff.router_k.clone(),
            head.diff.router_map.clone(),
        )
        .unwrap();
    }
    params
}

pub fn tokens(n: usize, d: usize, rng: &mut SeededRng) -> Matrix<f64> {
    rng.uniform_matrix(n, d, 1.0)
}

pub fn rel_err(reference: &Matrix<f64>, candidate: &Matrix<f64>) -> f64 {
    dydila_core::oracle::compare(reference, candidate, 0.0)
        .unwrap()
        .max_rel_error
}
