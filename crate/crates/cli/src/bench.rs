//! Wall-time scaling benchmarks.
//!
//! Every cell times one full attention layer on seeded tokens: shared Q/K/V
//! projection plus the attention itself for the baselines, the whole block
//! (routing, kernels, differential, convolution) for the DyDiLA variants.
//! Cells run on a single thread unless parallel cells are requested, in which
//! case independent cells run concurrently and each stays single-threaded.

use std::hint::black_box;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use dydila_core::attention::{
    linear_attention, multihead_forward, softmax_attention, BlockConfig, DydilaParams, Grid, Variant,
};
use dydila_core::kernels::FeatureMap;
use dydila_core::{par, Matrix, Real, SeededRng};
use rayon::prelude::*;

use crate::config::Precision;
use crate::flops::{flops_estimate_with, Banks, Impl};
use crate::io::INPUT_BOUND;

pub const WARMUP: usize = 2;

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub impls: Vec<Impl>,
    pub seq_lens: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub iters: usize,
    pub precision: Precision,
    pub seed: u64,
    pub gamma: f64,
    pub banks: Banks,
    pub parallel_cells: bool,
}

impl BenchSpec {
    pub fn new(impls: Vec<Impl>, seq_lens: Vec<usize>, d: usize, heads: usize) -> Self {
        BenchSpec {
            impls,
            seq_lens,
            d,
            heads,
            iters: 5,
            precision: Precision::F32,
            seed: 0,
            gamma: 3.0,
            banks: Banks::default(),
            parallel_cells: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub imp: Impl,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub iters: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub median_s: f64,
    pub flops: u128,
}

pub const CSV_HEADER: &str = "impl,N,d,heads,mean_s,std_s,flops,median_s,iters";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.9e},{:.9e},{},{:.9e},{}",
            self.imp, self.n, self.d, self.heads, self.mean_s, self.std_s, self.flops, self.median_s, self.iters
        )
    }
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Median of a non-empty sample.
pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

struct Cell<T> {
    imp: Impl,
    heads: usize,
    x: Matrix<T>,
    shared: [Matrix<T>; 3],
    block: Option<DydilaParams<T>>,
    gamma: T,
}

// Rough resident set of one cell: inputs, projections, four streams, output.
const WORKING_SET_MATRICES: usize = 16;

fn reserve_check(n: usize, d: usize, bytes_per: usize) -> Result<()> {
    let bytes = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(bytes_per * WORKING_SET_MATRICES))
        .with_context(|| format!("sequence length N = {n} overflows the address space"))?;
    let mut probe: Vec<u8> = Vec::new();
    if probe.try_reserve_exact(bytes).is_err() {
        bail!("cannot allocate {bytes} bytes for sequence length N = {n}");
    }
    Ok(())
}

impl<T: Real> Cell<T> {
    fn new(spec: &BenchSpec, imp: Impl, n: usize) -> Result<Self> {
        reserve_check(n, spec.d, T::BYTES)?;
        let mut rng = SeededRng::new(spec.seed);
        let x = rng.uniform_matrix::<f64>(n, spec.d, INPUT_BOUND).cast();
        let shared = [0, 1, 2].map(|_| rng.weight_matrix::<f64>(spec.d, spec.d).cast());
        let block = match imp {
            Impl::Dydila | Impl::Mapwise => {
                let cfg = BlockConfig {
                    d: spec.d,
                    heads: spec.heads,
                    n_p: spec.banks.n_p,
                    n_f: spec.banks.n_f,
                    n_d: spec.banks.n_d,
                    gamma_init: spec.gamma,
                    lambda_init: 0.01,
                    grid: Grid::near_square(n),
                    dwc: Some(true),
                    use_merged: true,
                    normalize: false,
                    variant: if imp == Impl::Mapwise {
                        Variant::MapWise
                    } else {
                        Variant::TokenWise
                    },
                };
                Some(DydilaParams::<f64>::random(&cfg, &mut rng)?.cast())
            }
            _ => None,
        };
        Ok(Cell {
            imp,
            heads: spec.heads,
            x,
            shared,
            block,
            gamma: T::lit(spec.gamma),
        })
    }

    fn per_head(
        &self,
        f: impl Fn(&Matrix<T>, &Matrix<T>, &Matrix<T>) -> dydila_core::Result<Matrix<T>>,
    ) -> Result<Matrix<T>> {
        let q = self.x.matmul(&self.shared[0])?;
        let k = self.x.matmul(&self.shared[1])?;
        let v = self.x.matmul(&self.shared[2])?;
        if self.heads == 1 {
            return Ok(f(&q, &k, &v)?);
        }
        let dh = q.cols() / self.heads;
        let mut out = Matrix::zeros(q.rows(), q.cols());
        for h in 0..self.heads {
            let s = h * dh;
            let o = f(
                &q.column_block(s, dh)?,
                &k.column_block(s, dh)?,
                &v.column_block(s, dh)?,
            )?;
            out.set_column_block(s, &o)?;
        }
        Ok(out)
    }

    fn run(&self) -> Result<Matrix<T>> {
        match self.imp {
            Impl::Softmax => self.per_head(softmax_attention),
            Impl::Linear => self.per_head(|q, k, v| linear_attention(q, k, v, &FeatureMap::Relu)),
            Impl::Focused => self.per_head(|q, k, v| linear_attention(q, k, v, &FeatureMap::Focused(self.gamma))),
            Impl::Dydila | Impl::Mapwise => {
                let block = self.block.as_ref().expect("block drawn for this variant");
                Ok(multihead_forward(&self.x, block)?.0)
            }
        }
    }
}

fn time_cell<T: Real>(spec: &BenchSpec, imp: Impl, n: usize) -> Result<BenchRecord> {
    let cell = Cell::<T>::new(spec, imp, n)?;
    par::run_sequential(|| -> Result<BenchRecord> {
        for _ in 0..WARMUP {
            black_box(cell.run()?);
        }
        let mut samples = Vec::with_capacity(spec.iters);
        for _ in 0..spec.iters {
            let start = Instant::now();
            black_box(cell.run()?);
            samples.push(start.elapsed().as_secs_f64().max(1e-9));
        }
        let (mean_s, std_s) = mean_std(&samples);
        Ok(BenchRecord {
            imp,
            n,
            d: spec.d,
            heads: spec.heads,
            iters: spec.iters,
            mean_s,
            std_s,
            median_s: median(&samples),
            flops: flops_estimate_with(imp, n, spec.d, spec.heads, spec.banks)?.total(),
        })
    })
}

/// Runs every `(impl, N)` cell, in the order given.
pub fn bench_run(spec: &BenchSpec) -> Result<Vec<BenchRecord>> {
    ensure!(spec.iters >= 3, "iterations must be at least 3, got {}", spec.iters);
    ensure!(
        !spec.impls.is_empty() && !spec.seq_lens.is_empty(),
        "nothing to benchmark"
    );
    ensure!(
        spec.d > 0 && spec.heads > 0 && spec.d.is_multiple_of(spec.heads),
        "heads must divide d"
    );
    if let Some(&n) = spec.seq_lens.iter().find(|&&n| n == 0) {
        bail!("sequence length must be positive, got {n}");
    }
    let cells: Vec<(Impl, usize)> = spec
        .impls
        .iter()
        .flat_map(|&imp| spec.seq_lens.iter().map(move |&n| (imp, n)))
        .collect();
    let one = |&(imp, n): &(Impl, usize)| {
        match spec.precision {
            Precision::F32 => time_cell::<f32>(spec, imp, n),
            Precision::F64 => time_cell::<f64>(spec, imp, n),
        }
        .with_context(|| format!("benchmark {imp} at N = {n}"))
    };
    if spec.parallel_cells {
        cells.par_iter().map(one).collect()
    } else {
        cells.iter().map(one).collect()
    }
}
