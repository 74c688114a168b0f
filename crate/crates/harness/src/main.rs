//! `sdlab`: run, edit, sweep, audit, and plot score-distillation
//! experiments described by a TOML config. Exit codes: 0 success, 1 config
//! error, 2 numeric failure mid-run, 3 gradient-audit failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sdlab_harness::config::ExperimentConfig;
use sdlab_harness::error::{HarnessError, Result};
use sdlab_harness::gradcheck::grad_check_suite;
use sdlab_harness::metrics::MetricsRow;
use sdlab_harness::runner::{run_editing, run_generation, RunRecord};
use sdlab_harness::svg::emit_svg;
use sdlab_harness::sweep::{sweep, SweepAxis};

#[derive(Parser)]
#[command(
    name = "sdlab",
    version,
    about = "Score-distillation laboratory on analytic Gaussian-mixture oracles"
)]
struct Cli {
    /// Experiment description (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the seed from [train].
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from [train].
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress progress output (errors still go to stderr).
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Lambda,
    Gamma,
    #[value(name = "disc_steps")]
    DiscSteps,
    Seed,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Lambda => SweepAxis::Lambda,
            AxisArg::Gamma => SweepAxis::Gamma,
            AxisArg::DiscSteps => SweepAxis::DiscSteps,
            AxisArg::Seed => SweepAxis::Seed,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a generator with a generation-mode method (sds, csd, vsd, asd).
    Run,
    /// Run an editing method (asd_edit, dds) from a frozen source cloud.
    Edit,
    /// Repeat the configured run across one axis of values.
    Sweep {
        /// Which knob to vary.
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Audit analytic gradients, pullbacks, and method reductions.
    Gradcheck,
    /// Render a particle snapshot CSV over the mixture contours.
    Plot {
        /// Particle CSV (as written by a run).
        #[arg(long)]
        points: PathBuf,
        /// Output SVG path.
        #[arg(long)]
        output: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| {
        HarnessError::Config("--config <file.toml> is required for this command".into())
    })?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    cfg.apply_overrides(cli.seed, cli.out.as_deref());
    Ok(cfg)
}

fn print_metrics_row(row: &MetricsRow) {
    println!(
        "step {:>7}  loglik {:>+10.4}  conf {:>+10.4}  spread {:>7.3}  churn {:>9.3e}  \
         agree {:>5.2}  critic {:>+10.4}",
        row.step,
        row.cond_loglik,
        row.classifier_conf,
        row.spread_ratio,
        row.churn,
        row.mode_agreement,
        row.wgan_value
    );
}

fn report_run(record: &RunRecord, quiet: bool) {
    if quiet {
        return;
    }
    for row in &record.metrics {
        print_metrics_row(row);
    }
    if !record.gamma_floor_warnings.is_empty() {
        println!(
            "warning: gamma sat below its stability floor at {} step(s); see run.json",
            record.gamma_floor_warnings.len()
        );
    }
    println!(
        "{} finished: {} steps, seed {}, {} noise rows, outputs in {}/",
        record.method, record.steps, record.seed, record.noise_rows_drawn, record.out_dir
    );
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Run => {
            let cfg = load_config(cli)?;
            let record = run_generation(&cfg)?;
            report_run(&record, cli.quiet);
        }
        Cmd::Edit => {
            let cfg = load_config(cli)?;
            let record = run_editing(&cfg)?;
            report_run(&record, cli.quiet);
        }
        Cmd::Sweep { axis, values } => {
            let cfg = load_config(cli)?;
            let out_root = PathBuf::from(&cfg.train.out_dir);
            let outcomes = sweep(&cfg, SweepAxis::from(*axis), values, &out_root)?;
            if !cli.quiet {
                for o in &outcomes {
                    let last = o.record.metrics.last().expect("at least one row");
                    print!("{} = {:<8} ", SweepAxis::from(*axis), o.value);
                    print_metrics_row(last);
                }
                println!(
                    "sweep finished: {} runs, summary in {}/summary.csv",
                    outcomes.len(),
                    out_root.display()
                );
            }
        }
        Cmd::Gradcheck => {
            let report = grad_check_suite(cli.seed.unwrap_or(0));
            for c in &report.checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag} {name}: {detail}", name = c.name, detail = c.detail);
            }
            if !report.all_passed() {
                return Err(HarnessError::GradCheck(format!(
                    "{} of {} checks failed",
                    report.failures(),
                    report.checks.len()
                )));
            }
        }
        Cmd::Plot { points, output } => {
            let cfg = load_config(cli)?;
            let cloud = sdlab_core::gen::read_points_csv(points)?;
            let oracle = cfg.build_oracle()?;
            let gmm = cfg.build_mixture()?;
            let cond = cfg.build_condition(&cfg.condition_y, &gmm)?;
            let info = emit_svg(&cloud, &oracle, &cond, output)?;
            if info.truncated {
                eprintln!(
                    "note: cloud has {} coordinates; drew the first two",
                    cloud.ncols()
                );
            }
            if !cli.quiet {
                println!(
                    "wrote {} ({} particles, {} contour lines)",
                    output.display(),
                    info.circles,
                    info.polylines
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
