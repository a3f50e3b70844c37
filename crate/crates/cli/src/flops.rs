//! Analytic FLOP counts of one attention layer.
//!
//! One multiply-add counts as 2 FLOPs. `N` tokens, width `d`, `h` heads of
//! width `d/h`. The `core` term is the attention product itself: the two
//! `N×N×d` products for softmax, the two `N×(d/h)×(d/h)` products per head
//! for the linear forms. Every term is exact integer arithmetic.

use std::fmt;

use anyhow::{ensure, Result};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Impl {
    Softmax,
    Linear,
    Focused,
    Dydila,
    Mapwise,
}

impl Impl {
    pub const ALL: [Impl; 5] = [Impl::Softmax, Impl::Linear, Impl::Focused, Impl::Dydila, Impl::Mapwise];

    pub fn name(self) -> &'static str {
        match self {
            Impl::Softmax => "softmax",
            Impl::Linear => "linear",
            Impl::Focused => "focused",
            Impl::Dydila => "dydila",
            Impl::Mapwise => "mapwise",
        }
    }
}

impl fmt::Display for Impl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopTerm {
    pub name: &'static str,
    pub formula: &'static str,
    pub flops: u128,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopEstimate {
    pub imp: Impl,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub terms: Vec<FlopTerm>,
}

impl FlopEstimate {
    pub fn core(&self) -> u128 {
        self.terms.iter().find(|t| t.name == "core").map_or(0, |t| t.flops)
    }

    pub fn total(&self) -> u128 {
        self.terms.iter().map(|t| t.flops).sum()
    }

    /// `term,formula,flops` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("term,formula,flops\n");
        for t in &self.terms {
            out.push_str(&format!("{},{},{}\n", t.name, t.formula, t.flops));
        }
        out.push_str(&format!("total,,{}\n", self.total()));
        out
    }
}

/// Kernel factor and differential factor bank sizes used by the routing terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Banks {
    pub n_p: usize,
    pub n_f: usize,
    pub n_d: usize,
}

impl Default for Banks {
    fn default() -> Self {
        Banks { n_p: 3, n_f: 9, n_d: 9 }
    }
}

pub fn flops_estimate(imp: Impl, n: usize, d: usize, heads: usize) -> Result<FlopEstimate> {
    flops_estimate_with(imp, n, d, heads, Banks::default())
}

pub fn flops_estimate_with(imp: Impl, n: usize, d: usize, heads: usize, banks: Banks) -> Result<FlopEstimate> {
    ensure!(n > 0 && d > 0 && heads > 0, "dimensions must be positive");
    ensure!(d.is_multiple_of(heads), "heads ({heads}) must divide d ({d})");
    let (n, dd, h) = (n as u128, d as u128, heads as u128);
    let (np, nf, nd) = (banks.n_p as u128, banks.n_f as u128, banks.n_d as u128);
    let term = |name, formula, flops| FlopTerm { name, formula, flops };
    let projection = term("projection", "6*N*d^2", 6 * n * dd * dd);
    let linear_core = term("core", "4*N*d^2/h", 4 * n * dd * dd / h);
    let terms = match imp {
        Impl::Softmax => vec![
            projection,
            term("core", "4*N^2*d", 4 * n * n * dd),
            term("softmax", "3*N^2*h", 3 * n * n * h),
        ],
        Impl::Linear => vec![
            projection,
            term("feature_map", "2*N*d", 2 * n * dd),
            linear_core,
            term("denominator", "4*N*d", 4 * n * dd),
        ],
        Impl::Focused => vec![
            projection,
            term("feature_map", "12*N*d", 12 * n * dd),
            linear_core,
            term("denominator", "4*N*d", 4 * n * dd),
        ],
        Impl::Dydila | Impl::Mapwise => {
            let mut t = vec![
                projection,
                term("routed_projection", "4*N*d^2", 4 * n * dd * dd),
                term("projector_routing", "4*N*d*n_p", 4 * n * dd * np),
                term("kernel_routing", "8*N*d*n_f", 8 * n * dd * nf),
                term("feature_map", "24*N*d", 24 * n * dd),
            ];
            if imp == Impl::Dydila {
                t.push(term("lambda_routing", "8*N*d*n_d", 8 * n * dd * nd));
                t.push(term("differencing", "4*N*d", 4 * n * dd));
                t.push(linear_core);
            } else {
                t.push(term("lambda_routing", "4*N*d*n_d", 4 * n * dd * nd));
                t.push(term("core", "8*N*d^2/h", 8 * n * dd * dd / h));
                t.push(term("differencing", "3*N*d", 3 * n * dd));
            }
            t.push(term("dwc", "18*N*d", 18 * n * dd));
            t
        }
    };
    Ok(FlopEstimate {
        imp,
        n: n as usize,
        d,
        heads,
        terms,
    })
}

/// Token count at which the softmax and linear core terms are equal: `d/h`.
pub fn core_crossover(d: usize, heads: usize) -> usize {
    d / heads
}
