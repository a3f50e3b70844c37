//! Stack evaluation commands: forward, attention-map dumps, λ statistics.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, ensure, Result};
use dydila_core::attention::{
    extract_attention_row, multihead_forward, stack_forward, AttentionStack, BlockDiagnostics, MapKind,
};
use dydila_core::{Matrix, Real};

use crate::config::{Precision, RunConfig};
use crate::flops::Impl;
use crate::io;
use crate::params::{init_params, stack_from_tensors};
use crate::weights;

/// Seeded stack, or the one stored at `weights`.
pub fn load_stack(cfg: &RunConfig, weights: Option<&Path>) -> Result<AttentionStack<f64>> {
    match weights {
        Some(path) => stack_from_tensors(cfg, weights::load(path)?),
        None => init_params(cfg),
    }
}

/// Tokens from `input`, or seeded ones matching the config grid.
pub fn input_tokens(cfg: &RunConfig, input: Option<&Path>) -> Result<Matrix<f64>> {
    let x = match input {
        Some(path) => io::read_tokens(path)?,
        None => io::seeded_tokens(cfg.seed, cfg.seq_len(), cfg.d),
    };
    ensure!(
        x.shape() == (cfg.seq_len(), cfg.d),
        "input is {}×{}, config expects {} tokens ({}×{} grid) of width {}",
        x.rows(),
        x.cols(),
        cfg.seq_len(),
        cfg.grid.h,
        cfg.grid.w,
        cfg.d
    );
    Ok(x)
}

fn forward_at<T: Real>(stack: &AttentionStack<f64>, x: &Matrix<f64>) -> Result<(String, bool)> {
    let (out, _) = stack_forward(&x.cast::<T>(), &stack.cast::<T>())?;
    Ok((io::tokens_to_csv(&out), out.is_finite()))
}

/// Output tokens of the whole stack as CSV, plus whether they are all finite.
pub fn forward(cfg: &RunConfig, stack: &AttentionStack<f64>, x: &Matrix<f64>) -> Result<(String, bool)> {
    match cfg.precision {
        Precision::F32 => forward_at::<f32>(stack, x),
        Precision::F64 => forward_at::<f64>(stack, x),
    }
}

fn diagnostics_at<T: Real>(stack: &AttentionStack<f64>, x: &Matrix<f64>) -> Result<Vec<BlockDiagnostics<T>>> {
    Ok(stack_forward(&x.cast::<T>(), &stack.cast::<T>())?.1)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

fn lambda_csv<T: Real>(diags: &[BlockDiagnostics<T>]) -> String {
    let mut out = String::from("block_index,mean_lambda_q,mean_lambda_k,mean_lambda_map\n");
    for (b, d) in diags.iter().enumerate() {
        let _ = writeln!(
            out,
            "{b},{},{},{}",
            fmt_opt(d.mean_lambda_q()),
            fmt_opt(d.mean_lambda_k()),
            fmt_opt(d.mean_lambda_map())
        );
    }
    out
}

fn routes_csv<T: Real>(diags: &[BlockDiagnostics<T>]) -> String {
    let mut out = String::from("block_index,head,bank,choice_index,count\n");
    let mut emit = |b: usize, head: &str, bank: &str, hist: Vec<usize>| {
        for (c, count) in hist.into_iter().enumerate() {
            let _ = writeln!(out, "{b},{head},{bank},{c},{count}");
        }
    };
    for (b, d) in diags.iter().enumerate() {
        emit(b, "", "projector_q", d.projector_routes_q.histogram());
        emit(b, "", "projector_k", d.projector_routes_k.histogram());
        for (h, head) in d.heads.iter().enumerate() {
            let h = h.to_string();
            for (bank, routes) in ["kernel_q", "kernel_k", "kernel_qp", "kernel_kp"]
                .iter()
                .zip(&head.kernel_routes)
            {
                emit(b, &h, bank, routes.histogram());
            }
            emit(b, &h, "lambda_q", head.lambda_routes_q.histogram());
            emit(b, &h, "lambda_k", head.lambda_routes_k.histogram());
        }
    }
    out
}

/// Per-block mean routed λ, and per-bank routing histograms.
pub fn stats_lambda(cfg: &RunConfig, stack: &AttentionStack<f64>, x: &Matrix<f64>) -> Result<(String, String)> {
    Ok(match cfg.precision {
        Precision::F32 => {
            let d = diagnostics_at::<f32>(stack, x)?;
            (lambda_csv(&d), routes_csv(&d))
        }
        Precision::F64 => {
            let d = diagnostics_at::<f64>(stack, x)?;
            (lambda_csv(&d), routes_csv(&d))
        }
    })
}

pub fn map_kind(imp: Impl) -> Result<MapKind> {
    Ok(match imp {
        Impl::Softmax => MapKind::Softmax,
        Impl::Linear => MapKind::Linear,
        Impl::Dydila | Impl::Mapwise => MapKind::Dydila,
        Impl::Focused => bail!("no attention map is defined for `focused`; use softmax, linear or dydila"),
    })
}

/// One attention row of block `block` for query `query`, as read on the
/// residual stream entering that block.
pub struct AttentionDump {
    pub row: Vec<f64>,
    pub csv: String,
    pub pgm: Vec<u8>,
}

fn row_at<T: Real>(
    stack: &AttentionStack<f64>,
    x: &Matrix<f64>,
    block: usize,
    query: usize,
    kind: MapKind,
) -> Result<Vec<f64>> {
    let stack = stack.cast::<T>();
    let mut h = x.cast::<T>();
    for params in &stack.blocks[..block] {
        h = h.add(&multihead_forward(&h, params)?.0)?;
    }
    let row = extract_attention_row(&stack.blocks[block], &h, query, kind)?;
    Ok(row.into_iter().map(Real::as_f64).collect())
}

pub fn dump_attention(
    cfg: &RunConfig,
    stack: &AttentionStack<f64>,
    x: &Matrix<f64>,
    block: usize,
    query: usize,
    kind: MapKind,
) -> Result<AttentionDump> {
    ensure!(
        block < stack.len(),
        "block index {block} out of range (stack has {} blocks)",
        stack.len()
    );
    ensure!(
        query < x.rows(),
        "query index {query} out of range ({} tokens)",
        x.rows()
    );
    let row = match cfg.precision {
        Precision::F32 => row_at::<f32>(stack, x, block, query, kind)?,
        Precision::F64 => row_at::<f64>(stack, x, block, query, kind)?,
    };
    let (h, w) = (cfg.grid.h, cfg.grid.w);
    let mut csv = String::from("row,col,weight\n");
    for (j, v) in row.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{v}", j / w, j % w);
    }
    let pgm = io::pgm(&row, h, w)?;
    Ok(AttentionDump { row, csv, pgm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GridSpec, Preset};

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::preset(Preset::Custom);
        cfg.d = 8;
        cfg.heads = 2;
        cfg.n_p = 2;
        cfg.n_f = 1;
        cfg.n_d = 1;
        cfg.blocks = 9;
        cfg.grid = GridSpec { h: 3, w: 4 };
        cfg
    }

    #[test]
    fn constant_schedule_means_equal_init() {
        let cfg = tiny();
        let stack = init_params(&cfg).unwrap();
        let x = input_tokens(&cfg, None).unwrap();
        let (lambda, routes) = stats_lambda(&cfg, &stack, &x).unwrap();
        let lines: Vec<&str> = lambda.lines().collect();
        assert_eq!(lines.len(), 10);
        for (b, line) in lines[1..].iter().enumerate() {
            assert_eq!(*line, format!("{b},0.01,0.01,"));
        }
        assert!(routes.starts_with("block_index,head,bank,choice_index,count\n"));
    }

    #[test]
    fn softmax_dump_row_sums_to_one() {
        let cfg = tiny();
        let stack = init_params(&cfg).unwrap();
        let x = input_tokens(&cfg, None).unwrap();
        let dump = dump_attention(&cfg, &stack, &x, 2, 5, MapKind::Softmax).unwrap();
        assert!((dump.row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let img = io::parse_pgm(&dump.pgm).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert_eq!(dump.csv.lines().count(), 13);
        assert!(dump_attention(&cfg, &stack, &x, 9, 0, MapKind::Softmax).is_err());
        assert!(dump_attention(&cfg, &stack, &x, 0, 12, MapKind::Softmax).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let cfg = tiny();
        let stack = init_params(&cfg).unwrap();
        let x = input_tokens(&cfg, None).unwrap();
        let (a, finite) = forward(&cfg, &stack, &x).unwrap();
        assert!(finite);
        assert_eq!(a, forward(&cfg, &stack, &x).unwrap().0);
        let mut wrong = cfg.clone();
        wrong.grid = GridSpec { h: 2, w: 2 };
        assert!(input_tokens(&wrong, None).is_ok());
        assert!(forward(&wrong, &stack, &input_tokens(&wrong, None).unwrap()).is_err());
    }
}
