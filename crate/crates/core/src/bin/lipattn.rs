use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lipattn::attention::{AttentionKind, MaskSet, MhaParams};
use lipattn::bounds::{bound, bound_masked_inf};
use lipattn::experiments::{
    dp_divergence_demo, invertibility_grid, plot_csv, run_sweep, selftest, write_diverge_csv, write_grid_csv,
    write_sweep_csv, AdamOptions, DivergeConfig, GridConfig, GridKind, SearchOptions, SweepConfig,
};
use lipattn::tensor::NormKind;
use lipattn::error::DOMINANCE_EXIT;
use lipattn::{Error, Result};

#[derive(Parser)]
#[command(name = "lipattn", version, about = "Lipschitz analysis of self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lower-bound search against the closed-form upper bound over a range of N.
    Sweep(SweepArgs),
    /// Fixed-point reconstruction error grid for residual attention.
    Invert(InvertArgs),
    /// Jacobian-norm ascent for dot-product and L2 attention.
    Diverge(DivergeArgs),
    /// Print the bound report for a parameter file or identity weights.
    Bound(BoundArgs),
    /// Run the quick invariant suites.
    Selftest(SelftestArgs),
    /// Render a CSV produced by sweep, invert or diverge as an SVG chart.
    Plot(PlotArgs),
}

#[derive(Args)]
struct OutputArgs {
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write JSON instead of CSV.
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    /// Write CSV (default).
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Sequence lengths, ascending.
    #[arg(long, value_delimiter = ',', default_value = "100,200,300,400,500,600,700,800,900,1000")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value = "inf")]
    p: NormKind,
    #[arg(long, default_value_t = 50)]
    restarts: usize,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 5000)]
    max_steps: usize,
    #[arg(long, default_value_t = 1e-6)]
    rel_tol: f64,
    /// Steps between rescans for the maximizing block row.
    #[arg(long, default_value_t = 500)]
    reselect_every: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct InvertArgs {
    /// Attention kinds: DP, L2-contractive.
    #[arg(long, value_delimiter = ',', default_value = "L2-contractive,DP")]
    kind: Vec<GridKind>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.9")]
    c: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,30,40,50")]
    iters: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// Half-width of the uniform input draw.
    #[arg(long, default_value_t = 10.0)]
    u: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct DivergeArgs {
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    u: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct BoundArgs {
    /// JSON parameter file; identity tied L2 weights when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value = "inf")]
    p: NormKind,
    /// Use the causal mask (∞-norm only).
    #[arg(long)]
    causal: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// CSV written by sweep, invert or diverge.
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn with_output(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            write(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            write(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(value: &T, w: &mut dyn Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    writeln!(w)?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = SweepConfig {
        n_list: a.n,
        d: a.d,
        h: a.heads,
        p: a.p,
        restarts: a.restarts,
        top_k: a.top_k,
        seed: a.seed,
        search: SearchOptions {
            adam: AdamOptions { lr: a.lr, max_steps: a.max_steps, rel_tol: a.rel_tol },
            reselect_every: a.reselect_every,
            ..SearchOptions::default()
        },
    };
    let rows = run_sweep(&cfg)?;
    with_output(a.output.out.as_deref(), |w| if a.output.json { write_json(&rows, w) } else { write_sweep_csv(&rows, w) })?;
    rows.iter().try_for_each(|r| r.check_dominance())
}

fn invert(a: InvertArgs) -> Result<()> {
    let mut rows = Vec::new();
    for kind in a.kind {
        let cfg = GridConfig {
            kind,
            c_list: a.c.clone(),
            iter_list: a.iters.clone(),
            n: a.n,
            d: a.d,
            h: a.heads,
            batch: a.batch,
            u: a.u,
            seed: a.seed,
        };
        rows.extend(invertibility_grid(&cfg)?);
    }
    with_output(a.output.out.as_deref(), |w| if a.output.json { write_json(&rows, w) } else { write_grid_csv(&rows, w) })
}

fn diverge(a: DivergeArgs) -> Result<()> {
    let cfg = DivergeConfig { n: a.n, d: a.d, steps: a.steps, lr: a.lr, u: a.u, seed: a.seed };
    let rows = dp_divergence_demo(&cfg)?;
    with_output(a.output.out.as_deref(), |w| if a.output.json { write_json(&rows, w) } else { write_diverge_csv(&rows, w) })
}

fn bound_cmd(a: BoundArgs) -> Result<()> {
    let params = match &a.params {
        Some(path) => MhaParams::from_json(&fs::read_to_string(path)?).map_err(|e| match e {
            Error::Json(e) => Error::Domain(format!("{}: {e}", path.display())),
            e => e,
        })?,
        None => MhaParams::identity(AttentionKind::L2, a.d, a.heads)?,
    };
    let report = if a.causal {
        if a.p != NormKind::Inf {
            return Err(Error::Unsupported("the masked bound is only available for p = inf".into()));
        }
        bound_masked_inf(&params, a.n, &MaskSet::causal(a.n))?
    } else {
        bound(&params, a.n, a.p)?
    };
    with_output(a.out.as_deref(), |w| write_json(&report, w))
}

fn selftest_cmd(a: SelftestArgs) -> Result<ExitCode> {
    let results = selftest(a.seed);
    with_output(a.out.as_deref(), |w| {
        if a.json {
            return write_json(&results, w);
        }
        for r in &results {
            writeln!(w, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail)?;
        }
        Ok(())
    })?;
    Ok(if results.iter().any(|r| r.dominance) {
        ExitCode::from(DOMINANCE_EXIT)
    } else if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Sweep(a) => sweep(a).map(|_| ExitCode::SUCCESS),
        Command::Invert(a) => invert(a).map(|_| ExitCode::SUCCESS),
        Command::Diverge(a) => diverge(a).map(|_| ExitCode::SUCCESS),
        Command::Bound(a) => bound_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Selftest(a) => selftest_cmd(a),
        Command::Plot(a) => plot_csv(&a.input, &a.out).map(|_| ExitCode::SUCCESS),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(e.exit_code())
    })
}
