use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use chemokit::config::{parse_config, Kind};
use chemokit::experiments::{run_experiment, write_outputs};

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum KindArg {
    Run,
    Convergence,
    Asymptotic,
    Energy,
    BlowupRadial,
    BlowupCartesian,
    SteadySubcritical,
    TwoSpecies,
}

impl From<KindArg> for Kind {
    fn from(k: KindArg) -> Kind {
        match k {
            KindArg::Run => Kind::Run,
            KindArg::Convergence => Kind::Convergence,
            KindArg::Asymptotic => Kind::Asymptotic,
            KindArg::Energy => Kind::Energy,
            KindArg::BlowupRadial => Kind::BlowupRadial,
            KindArg::BlowupCartesian => Kind::BlowupCartesian,
            KindArg::SteadySubcritical => Kind::SteadySubcritical,
            KindArg::TwoSpecies => Kind::TwoSpecies,
        }
    }
}

/// Keller-Segel experiment runner.
#[derive(Debug, Parser)]
#[command(name = "chemokit", version)]
struct Cli {
    /// Experiment kind; must match the config section.
    kind: KindArg,
    /// Config file with one `[kind]` section.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, env = "CHEMOKIT_THREADS", default_value_t = 1)]
    threads: usize,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUN_FAILED: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_CONFIG);
    }
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.config.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let spec = match parse_config(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.config.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let kind = Kind::from(cli.kind);
    if spec.kind != kind {
        eprintln!(
            "error: {}: section is [{}] but the command is `{}`",
            cli.config.display(),
            spec.kind.name(),
            kind.name()
        );
        return ExitCode::from(EXIT_CONFIG);
    }
    let report = match run_experiment(&spec, cli.threads) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    print!("{}", report.summary());
    let dir = cli
        .out
        .or_else(|| spec.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("out_{}", kind.name())));
    if let Err(e) = write_outputs(&report, &dir) {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_RUN_FAILED);
    }
    println!("\noutputs in {}", dir.display());
    let failed = report.failed_runs();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed", report.runs.len());
        return ExitCode::from(EXIT_RUN_FAILED);
    }
    ExitCode::SUCCESS
}
