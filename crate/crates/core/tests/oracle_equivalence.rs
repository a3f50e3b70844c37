//! Fast paths against the brute-force oracles on seeded instances.

mod common;

use common::{block_config, rel_err, tokens, varied_block};
use dydila_core::attention::{
    dwc_forward, dydila_forward, extract_attention_row, linear_attention, multihead_forward, reparam_merge,
    softmax_attention, stack_forward, AttentionStack, DwcParams, Grid, MapKind, Variant,
};
use dydila_core::differential::{
    expand_tokenwise, mapwise_forward, select_lambda_map, select_lambdas, tdo_apply, tdo_forward, DiffInputs,
    DifferentialBank,
};
use dydila_core::kernels::{dmk_forward, FeatureMap, KernelBank};
use dydila_core::oracle::{self, compare};
use dydila_core::projection::{dpm_forward, project_shared, ProjectorBank};
use dydila_core::routing::Router;
use dydila_core::{Matrix, SeededRng};

fn positive(n: usize, d: usize, rng: &mut SeededRng) -> Matrix<f64> {
    rng.uniform_matrix::<f64>(n, d, 1.0).relu()
}

#[test]
fn shared_projection_matches_naive_products() {
    let mut rng = SeededRng::new(10);
    let x = tokens(8, 16, &mut rng);
    let bank = ProjectorBank::random(16, 3, &mut rng).unwrap();
    let p = project_shared(&x, &bank).unwrap();
    assert_eq!(p.q, oracle::naive_matmul(&x, &bank.w_q0).unwrap());
    assert_eq!(p.k, oracle::naive_matmul(&x, &bank.w_k0).unwrap());
    assert_eq!(p.v, oracle::naive_matmul(&x, &bank.w_v0).unwrap());
}

#[test]
fn dpm_matches_per_token_loop() {
    let mut rng = SeededRng::new(11);
    let x = tokens(16, 8, &mut rng);
    let bank = ProjectorBank::random(8, 3, &mut rng).unwrap();
    let out = dpm_forward(&x, &bank).unwrap();
    let [q, k, v, qp, kp] = oracle::dpm_loop(&x, &bank);
    assert_eq!(out.routes_q.indices, oracle::route_loop(&x, &bank.router_q));
    assert_eq!(out.routes_k.indices, oracle::route_loop(&x, &bank.router_k));
    // Same left-to-right accumulation on both sides.
    assert_eq!((out.q, out.k, out.v, out.qp, out.kp), (q, k, v, qp, kp));
    // More than one projector must actually be in use for this to mean much.
    assert!(out.routes_q.histogram().iter().filter(|&&c| c > 0).count() > 1);
}

#[test]
fn dmk_matches_per_token_oracle() {
    let mut rng = SeededRng::new(12);
    let z = tokens(16, 8, &mut rng);
    let router = Router::new(rng.weight_matrix(8, 9)).unwrap();
    let gammas: Vec<f64> = (0..9).map(|i| 0.5 + i as f64).collect();
    let bank = KernelBank::new(gammas, router).unwrap();
    let (out, routes) = dmk_forward(&z, &bank).unwrap();
    assert_eq!(routes.indices, oracle::route_loop(&z, bank.router()));
    assert!(rel_err(&oracle::dmk_loop(&z, &bank), &out) <= 1e-12);
}

#[test]
fn lambdas_match_per_token_oracle() {
    let mut rng = SeededRng::new(13);
    let (q, qp, k, kp) = (
        positive(16, 8, &mut rng),
        positive(16, 8, &mut rng),
        positive(16, 8, &mut rng),
        positive(16, 8, &mut rng),
    );
    let lambdas: Vec<f64> = (0..9).map(|i| 0.01 * (i + 1) as f64).collect();
    let base = DifferentialBank::random(8, 9, 0.0, &mut rng).unwrap();
    let bank = DifferentialBank::new(lambdas.clone(), base.router_q, base.router_k, base.router_map).unwrap();
    let v = tokens(16, 8, &mut rng);
    let inputs = DiffInputs {
        q: &q,
        qp: &qp,
        k: &k,
        kp: &kp,
        v: &v,
    };
    let routed = select_lambdas(&inputs.concat_q().unwrap(), &inputs.concat_k().unwrap(), &bank).unwrap();
    assert_eq!(routed.lambda_q, oracle::lambdas_loop(&q, &qp, &bank.router_q, &lambdas));
    assert_eq!(routed.lambda_k, oracle::lambdas_loop(&k, &kp, &bank.router_k, &lambdas));
    let (lm, _) = select_lambda_map(&inputs.concat_q().unwrap(), &bank).unwrap();
    assert_eq!(lm, oracle::lambdas_loop(&q, &qp, &bank.router_map, &lambdas));
}

#[test]
fn tdo_and_mapwise_match_explicit_maps() {
    let mut rng = SeededRng::new(14);
    let n = 64;
    let (q, qp, k, kp) = (
        positive(n, 8, &mut rng),
        positive(n, 8, &mut rng),
        positive(n, 8, &mut rng),
        positive(n, 8, &mut rng),
    );
    let v = tokens(n, 8, &mut rng);
    let base = DifferentialBank::random(8, 9, 0.0, &mut rng).unwrap();
    let lambdas: Vec<f64> = (0..9).map(|_| rng.uniform(0.3)).collect();
    let bank = DifferentialBank::new(lambdas.clone(), base.router_q, base.router_k, base.router_map).unwrap();
    let inputs = DiffInputs {
        q: &q,
        qp: &qp,
        k: &k,
        kp: &kp,
        v: &v,
    };

    let lq = oracle::lambdas_loop(&q, &qp, &bank.router_q, &lambdas);
    let lk = oracle::lambdas_loop(&k, &kp, &bank.router_k, &lambdas);
    let explicit = oracle::explicit_tdo(&q, &qp, &k, &kp, &v, &lq, &lk).unwrap();
    assert!(
        compare(&explicit, &tdo_forward(&inputs, &bank).unwrap(), 1e-10)
            .unwrap()
            .pass
    );

    let normalized = tdo_apply(&inputs, &lq, &lk, true).unwrap();
    let explicit_norm = oracle::explicit_tdo_normalized(&q, &qp, &k, &kp, &v, &lq, &lk).unwrap();
    assert!(compare(&explicit_norm, &normalized, 1e-10).unwrap().pass);

    let lm = oracle::lambdas_loop(&q, &qp, &bank.router_map, &lambdas);
    let explicit_map = oracle::explicit_mapwise(&q, &qp, &k, &kp, &v, &lm).unwrap();
    assert!(
        compare(&explicit_map, &mapwise_forward(&inputs, &bank).unwrap(), 1e-10)
            .unwrap()
            .pass
    );
}

#[test]
fn last_expansion_term_is_small_for_small_factors() {
    let mut rng = SeededRng::new(15);
    let n = 32;
    let streams: Vec<Matrix<f64>> = (0..4).map(|_| positive(n, 8, &mut rng)).collect();
    let v = tokens(n, 8, &mut rng);
    let lq: Vec<f64> = (0..n).map(|_| 0.1 * rng.next_unit()).collect();
    let lk: Vec<f64> = (0..n).map(|_| 0.1 * rng.next_unit()).collect();
    let inputs = DiffInputs {
        q: &streams[0],
        qp: &streams[1],
        k: &streams[2],
        kp: &streams[3],
        v: &v,
    };
    let e = expand_tokenwise(&inputs, &lq, &lk).unwrap();
    let ratio = e.term4.max_abs() / e.term1.max_abs();
    assert!(ratio <= 0.01, "term4/term1 = {ratio}");
}

#[test]
fn baselines_match_explicit_maps() {
    let mut rng = SeededRng::new(16);
    let (q, k, v) = (tokens(8, 4, &mut rng), tokens(8, 4, &mut rng), tokens(8, 4, &mut rng));
    let explicit = oracle::explicit_softmax_attention(&q, &k, &v).unwrap();
    assert!(
        compare(&explicit, &softmax_attention(&q, &k, &v).unwrap(), 1e-12)
            .unwrap()
            .pass
    );

    let (q, k, v) = (
        tokens(32, 8, &mut rng),
        tokens(32, 8, &mut rng),
        tokens(32, 8, &mut rng),
    );
    for kernel in [FeatureMap::Relu, FeatureMap::Focused(3.0), FeatureMap::Focused(0.5)] {
        let explicit = oracle::explicit_linear_attention(&q, &k, &v, &kernel).unwrap();
        let fast = linear_attention(&q, &k, &v, &kernel).unwrap();
        assert!(compare(&explicit, &fast, 1e-10).unwrap().pass, "{kernel:?}");
    }
}

#[test]
fn block_matches_composed_oracle() {
    let mut rng = SeededRng::new(17);
    let grid = Grid::new(4, 4);
    let x = tokens(16, 32, &mut rng);
    for variant in [Variant::TokenWise, Variant::MapWise] {
        for normalize in [false, true] {
            let mut cfg = block_config(32, 1, grid);
            cfg.variant = variant;
            cfg.normalize = normalize;
            let params = varied_block(&cfg, &mut rng);
            let (out, _) = dydila_forward(&x, &params).unwrap();
            let reference = oracle::block_oracle(&x, &params).unwrap();
            let report = compare(&reference, &out, 1e-10).unwrap();
            assert!(report.pass, "{variant:?} normalize={normalize}: {report:?}");
        }
    }
}

#[test]
fn multihead_matches_loop_over_heads() {
    let mut rng = SeededRng::new(18);
    let grid = Grid::new(4, 4);
    let x = tokens(16, 32, &mut rng);
    let mut cfg = block_config(32, 4, grid);
    cfg.use_merged = true;
    let params = varied_block(&cfg, &mut rng);
    let (out, diag) = multihead_forward(&x, &params).unwrap();
    assert_eq!(diag.heads.len(), 4);
    let reference = oracle::block_oracle(&x, &params).unwrap();
    assert!(compare(&reference, &out, 1e-12).unwrap().pass);
}

#[test]
fn merged_convolution_matches_loop() {
    let mut rng = SeededRng::new(19);
    let v = tokens(64, 32, &mut rng);
    let grid = Grid::new(8, 8);
    let dwc = reparam_merge(&DwcParams::random(32, true, &mut rng));
    let mut reference = oracle::conv_loop(&v, grid, &dwc.kernels);
    reference = reference.add(&v).unwrap();
    let merged = dwc_forward(&v, grid, &dwc, true).unwrap();
    assert!(compare(&reference, &merged, 1e-12).unwrap().pass);
    assert_eq!(oracle::conv_loop(&v, grid, dwc.merged.as_ref().unwrap()), merged);
}

#[test]
fn attention_rows() {
    let mut rng = SeededRng::new(20);
    let grid = Grid::new(4, 4);
    let x = tokens(16, 8, &mut rng);
    let mut cfg = block_config(8, 1, grid);
    cfg.dwc = None;
    let params = varied_block(&cfg, &mut rng);

    let row = extract_attention_row(&params, &x, 3, MapKind::Softmax).unwrap();
    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    let row = extract_attention_row(&params, &x, 3, MapKind::Linear).unwrap();
    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);

    // Row · V reproduces the unnormalized block output.
    let (out, _) = dydila_forward(&x, &params).unwrap();
    let v = project_shared(&x, &params.projectors).unwrap().v;
    for i in [0, 7, 15] {
        let row = extract_attention_row(&params, &x, i, MapKind::Dydila).unwrap();
        for c in 0..8 {
            let value: f64 = row.iter().enumerate().map(|(j, w)| w * v.get(j, c)).sum();
            assert!((value - out.get(i, c)).abs() <= 1e-10 * out.max_abs());
        }
    }

    assert!(extract_attention_row(&params, &x, 16, MapKind::Softmax).is_err());
}

#[test]
fn zero_lambda_map_row_is_kernel_product() {
    let mut rng = SeededRng::new(21);
    let grid = Grid::new(2, 4);
    let x = tokens(8, 8, &mut rng);
    let mut cfg = block_config(8, 1, grid);
    cfg.lambda_init = 0.0;
    cfg.dwc = None;
    let params = dydila_core::attention::DydilaParams::<f64>::random(&cfg, &mut rng).unwrap();
    let proj = dpm_forward(&x, &params.projectors).unwrap();
    let (fq, _) = dmk_forward(&proj.q, &params.heads[0].kernels.q).unwrap();
    let (fk, _) = dmk_forward(&proj.k, &params.heads[0].kernels.k).unwrap();
    let row = extract_attention_row(&params, &x, 2, MapKind::Dydila).unwrap();
    for (j, w) in row.iter().enumerate() {
        let expected: f64 = fq.row(2).iter().zip(fk.row(j)).map(|(a, b)| a * b).sum();
        assert!((w - expected).abs() <= 1e-14);
    }
}

#[test]
fn stack_residual_and_smoke() {
    let mut rng = SeededRng::new(22);
    let grid = Grid::new(4, 4);
    let x = tokens(16, 32, &mut rng);
    let cfg = block_config(32, 2, grid);
    let block = dydila_core::attention::DydilaParams::<f64>::random(&cfg, &mut rng).unwrap();
    let stack = AttentionStack::new(vec![block.clone()]).unwrap();
    let (out, diag) = stack_forward(&x, &stack).unwrap();
    assert_eq!(out, x.add(&multihead_forward(&x, &block).unwrap().0).unwrap());
    assert_eq!(diag.len(), 1);

    // Small preset width, nine blocks. The unnormalized operator is cubic in
    // its input, so the seeded tokens are kept small.
    let mut cfg = block_config(384, 6, grid);
    cfg.use_merged = true;
    let blocks = (0..9)
        .map(|_| dydila_core::attention::DydilaParams::<f64>::random(&cfg, &mut rng).unwrap())
        .collect();
    let stack = AttentionStack::new(blocks).unwrap();
    let x = rng.uniform_matrix::<f64>(16, 384, 0.1);
    let (out, diag) = stack_forward(&x, &stack).unwrap();
    assert!(out.is_finite());
    assert_eq!(diag.len(), 9);
    assert!(diag.iter().all(|d| d.mean_lambda_q() == Some(0.01)));
}

#[test]
fn zero_parameter_stack_is_identity() {
    let mut rng = SeededRng::new(23);
    let grid = Grid::new(3, 3);
    let cfg = block_config(6, 2, grid);
    let mut block = dydila_core::attention::DydilaParams::<f64>::random(&cfg, &mut rng).unwrap();
    let zero = |m: &Matrix<f64>| Matrix::zeros(m.rows(), m.cols());
    let p = &mut block.projectors;
    for w in [&mut p.w_q0, &mut p.w_k0, &mut p.w_v0] {
        *w = zero(w);
    }
    for w in p.w_q.iter_mut().chain(p.w_k.iter_mut()) {
        *w = zero(w);
    }
    block.dwc = Some(DwcParams::new(vec![[0.0; 9]; 6], false));
    let stack = AttentionStack::new(vec![block.clone(), block]).unwrap();
    let x = tokens(9, 6, &mut rng);
    assert_eq!(stack_forward(&x, &stack).unwrap().0, x);
    assert!(stack_forward(&Matrix::zeros(9, 6), &stack).unwrap().0.max_abs() == 0.0);
}
