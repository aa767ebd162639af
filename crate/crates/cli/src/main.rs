use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fredholm_core::opdsl::file::{parse_complex, parse_window, LambdaGrid};
use fredholm_lab::validate::cmd_validate;
use fredholm_lab::{cmd_check, cmd_essspec, cmd_geom, cmd_limits, load, CliError, Format, Settings};

/// Fredholm verdicts and essential spectra for differential operators on
/// model non-compact manifolds.
#[derive(Parser)]
#[command(name = "fredholm-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stratification, isotropy groups and the Fredholm-groupoid predicate.
    Geom(Common),
    /// Limit operators with ghost-generator annotations.
    Limits(Common),
    /// Fredholm verdicts for P - lambda.
    Check(Common),
    /// Essential spectrum inside a window.
    Essspec(Common),
    /// Engine and finite-difference oracle side by side.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// Operator file.
    file: PathBuf,
    /// Spectral parameter, e.g. `2`, `1-0.5i`.
    #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
    lambda: Option<num_complex::Complex64>,
    /// Real lambda grid `start:stop:step`.
    #[arg(long, value_parser = LambdaGrid::parse, allow_hyphen_values = true)]
    lambda_grid: Option<LambdaGrid>,
    /// Spectral window `a:b`.
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    window: Option<(f64, f64)>,
    /// Covariable grid points for one covariable (sqrt of it per axis for two).
    #[arg(long)]
    resolution: Option<usize>,
    /// Exit with status 3 when any verdict is Indeterminate.
    #[arg(long)]
    strict: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Seed for randomized property fixtures (validate: limit homomorphism on
    /// 100 random pairs).
    #[arg(long)]
    seed: Option<u64>,
    /// Compute verdicts even when the groupoid predicate fails.
    #[arg(long = "override")]
    allow_unjustified: bool,
    /// Harness self-test: replace engine verdicts by a certified "Fredholm".
    #[arg(long, hide = true)]
    stub_engine: bool,
}

fn threads() {
    if let Some(n) = std::env::var("FREDHOLM_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    threads();
    let (name, c) = match &cli.command {
        Command::Geom(c) => ("geom", c),
        Command::Limits(c) => ("limits", c),
        Command::Check(c) => ("check", c),
        Command::Essspec(c) => ("essspec", c),
        Command::Validate(c) => ("validate", c),
    };
    let settings = Settings {
        lambda: c.lambda,
        lambda_grid: c.lambda_grid,
        window: c.window,
        resolution: c.resolution,
        allow_unjustified: c.allow_unjustified,
        seed: c.seed,
        stub_engine: c.stub_engine,
    };
    let result = load(&c.file).and_then(|input| match name {
        "geom" => cmd_geom(&input, &settings),
        "limits" => cmd_limits(&input, &settings),
        "check" => cmd_check(&input, &settings),
        "essspec" => cmd_essspec(&input, &settings),
        _ => cmd_validate(&input, &settings),
    });
    match result {
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Ok(report) => {
            print!("{}", report.render(c.format));
            if report.disagreements > 0 {
                ExitCode::from(4)
            } else if c.strict && report.indeterminate {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}
