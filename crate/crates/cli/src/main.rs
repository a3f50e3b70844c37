use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dydila_cli::bench::{bench_run, to_csv, BenchSpec};
use dydila_cli::check::run_checks;
use dydila_cli::config::{GridSpec, Precision, Preset, RunConfig};
use dydila_cli::flops::{flops_estimate_with, Banks, Impl};
use dydila_cli::params::{init_params, stack_tensors};
use dydila_cli::{run, weights};
use dydila_core::attention::Grid;

#[derive(Parser)]
#[command(
    name = "dydila",
    version,
    about = "Dynamic differential linear attention: checks, benchmarks and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Token count; repeat or comma-separate for several in `bench`.
    #[arg(long, global = true, value_delimiter = ',')]
    seq_len: Vec<usize>,
    /// Model width (switches the preset to `custom`).
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Implementation; repeat or comma-separate for several in `bench`.
    #[arg(long = "impl", global = true, value_enum, value_delimiter = ',')]
    imp: Vec<Impl>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Output path (stdout when absent, where that makes sense).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Token CSV input (seeded tokens when absent).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Weight file, inline JSON or manifest (seeded weights when absent).
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the desk-scale invariant and oracle suite.
    Check,
    /// Time implementations over sequence lengths; CSV output.
    Bench {
        /// Run independent cells concurrently.
        #[arg(long)]
        parallel_cells: bool,
    },
    /// Analytic FLOP count of one attention layer; CSV output.
    Flops,
    /// Evaluate the stack on the input tokens; CSV output.
    Forward,
    /// Write one attention row as `<out>.csv` and `<out>.pgm`.
    DumpAttn {
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, default_value_t = 0)]
        query: usize,
    },
    /// Per-block mean routed differential factors; CSV output.
    StatsLambda {
        /// Also write per-bank routing histograms here.
        #[arg(long)]
        routes: Option<PathBuf>,
    },
    /// Write a complete default config (and optionally seeded weights).
    Init {
        /// Write weights here: `.json` for inline arrays, any other path for
        /// a manifest plus raw blob.
        #[arg(long = "save-weights")]
        save_weights: Option<PathBuf>,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                if self.preset.is_some() {
                    bail!("--preset and --config are mutually exclusive");
                }
                RunConfig::load(path)?
            }
            None => RunConfig::preset(self.preset.unwrap_or(Preset::Small)),
        };
        if let Some(d) = self.dim {
            if d != cfg.d {
                cfg.preset = Preset::Custom;
                cfg.d = d;
            }
        }
        if let Some(h) = self.heads {
            cfg.heads = h;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        match self.seq_len.as_slice() {
            [] => {}
            [n] => {
                let g = Grid::near_square(*n);
                cfg.grid = GridSpec { h: g.h, w: g.w };
            }
            _ => bail!("this command takes a single --seq-len"),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn single_impl(&self, default: Impl) -> Result<Impl> {
        match self.imp.as_slice() {
            [] => Ok(default),
            [i] => Ok(*i),
            _ => bail!("this command takes a single --impl"),
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn with_suffix(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn bench(c: &Common, parallel_cells: bool) -> Result<()> {
    let explicit_config = c.config.is_some() || c.preset.is_some();
    let base = if explicit_config {
        Some(c.run_config_for_bench()?)
    } else {
        None
    };
    let d = c.dim.or(base.as_ref().map(|b| b.d)).unwrap_or(64);
    let heads = c.heads.or(base.as_ref().map(|b| b.heads)).unwrap_or(1);
    let seq_lens = if c.seq_len.is_empty() {
        vec![1024, 4096]
    } else {
        c.seq_len.clone()
    };
    let impls = if c.imp.is_empty() {
        Impl::ALL.to_vec()
    } else {
        c.imp.clone()
    };
    let mut spec = BenchSpec::new(impls, seq_lens, d, heads);
    spec.iters = c.iters.unwrap_or(5);
    spec.precision = c.precision.unwrap_or(Precision::F32);
    spec.seed = c.seed.or(base.as_ref().map(|b| b.seed)).unwrap_or(0);
    spec.parallel_cells = parallel_cells;
    if let Some(b) = &base {
        spec.gamma = b.gamma_init;
        spec.banks = Banks {
            n_p: b.n_p,
            n_f: b.n_f,
            n_d: b.n_d,
        };
    }
    emit(c.out.as_deref(), &to_csv(&bench_run(&spec)?))
}

impl Common {
    // Bench and flops take their own width and several sequence lengths, so
    // only the bank sizes, γ and seed are read from the config.
    fn run_config_for_bench(&self) -> Result<RunConfig> {
        let mut relaxed = self.clone();
        relaxed.seq_len.clear();
        relaxed.dim = None;
        relaxed.heads = None;
        relaxed.run_config()
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let c = &cli.common;
    match cli.command {
        Command::Check => {
            let report = run_checks(&c.run_config()?)?;
            emit(c.out.as_deref(), &report.table())?;
            if !report.all_pass() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Bench { parallel_cells } => bench(c, parallel_cells)?,
        Command::Flops => {
            let imp = c.single_impl(Impl::Dydila)?;
            let n = match c.seq_len.as_slice() {
                [] => 4096,
                [n] => *n,
                _ => bail!("flops takes a single --seq-len"),
            };
            let cfg = if c.config.is_some() || c.preset.is_some() {
                Some(c.run_config_for_bench()?)
            } else {
                None
            };
            let d = c.dim.or(cfg.as_ref().map(|b| b.d)).unwrap_or(384);
            let heads = c.heads.or(cfg.as_ref().map(|b| b.heads)).unwrap_or(1);
            let banks = cfg.map_or(Banks::default(), |b| Banks {
                n_p: b.n_p,
                n_f: b.n_f,
                n_d: b.n_d,
            });
            emit(
                c.out.as_deref(),
                &flops_estimate_with(imp, n, d, heads, banks)?.to_csv(),
            )?;
        }
        Command::Forward => {
            let cfg = c.run_config()?;
            let stack = run::load_stack(&cfg, c.weights.as_deref())?;
            let x = run::input_tokens(&cfg, c.input.as_deref())?;
            let (csv, finite) = run::forward(&cfg, &stack, &x)?;
            if !finite {
                eprintln!("warning: output contains non-finite values; enable `normalize` or use smaller inputs");
            }
            emit(c.out.as_deref(), &csv)?;
        }
        Command::DumpAttn { block, query } => {
            let cfg = c.run_config()?;
            let kind = run::map_kind(c.single_impl(Impl::Dydila)?)?;
            let Some(out) = c.out.as_deref() else {
                bail!("dump-attn needs --out PREFIX");
            };
            let stack = run::load_stack(&cfg, c.weights.as_deref())?;
            let x = run::input_tokens(&cfg, c.input.as_deref())?;
            let dump = run::dump_attention(&cfg, &stack, &x, block, query, kind)?;
            emit(Some(&with_suffix(out, ".csv")), &dump.csv)?;
            let pgm = with_suffix(out, ".pgm");
            fs::write(&pgm, &dump.pgm).with_context(|| format!("writing {}", pgm.display()))?;
        }
        Command::StatsLambda { routes } => {
            let cfg = c.run_config()?;
            let stack = run::load_stack(&cfg, c.weights.as_deref())?;
            let x = run::input_tokens(&cfg, c.input.as_deref())?;
            let (lambda, hist) = run::stats_lambda(&cfg, &stack, &x)?;
            emit(c.out.as_deref(), &lambda)?;
            if let Some(path) = routes {
                emit(Some(&path), &hist)?;
            }
        }
        Command::Init { save_weights } => {
            let cfg = c.run_config()?;
            match c.out.as_deref() {
                Some(path) => cfg.save(path)?,
                None => print!("{}", cfg.to_json()),
            }
            if let Some(path) = save_weights {
                let tensors = stack_tensors(&init_params(&cfg)?);
                if path.extension().is_some_and(|e| e == "json") {
                    weights::save_inline(&path, &tensors)?;
                } else {
                    weights::save_blob(&path, &tensors, cfg.precision)?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
