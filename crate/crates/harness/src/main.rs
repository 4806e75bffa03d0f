use std::path::PathBuf;
use std::process::ExitCode;

use adaptlab::config::{DatasetSource, ExperimentConfig};
use adaptlab::error::{EXIT_GRADCHECK, EXIT_OK, EXIT_USAGE};
use adaptlab::{cmd_gradcheck, cmd_report, cmd_run, cmd_synth, HarnessError, RunOptions};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adaptlab", version, about = "Adaptation-protocol experiments on embedding datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and pretrained trunk.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every missing (protocol, seed) cell and update the results CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Render the results CSV as Markdown tables.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        perturb: Option<f64>,
    },
}

fn execute(command: Command) -> Result<i32, HarnessError> {
    match command {
        Command::Synth { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let DatasetSource::Synth(spec) = &config.dataset else {
                return Err(HarnessError::Config("`synth` needs a `dataset.synth` block".into()));
            };
            let files = cmd_synth(spec, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Run {
            config,
            bench,
            out,
            workers,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let options = RunOptions {
                workers,
                max_cells: None,
            };
            let summary = cmd_run(&config, &bench, &out, &options)?;
            println!(
                "executed {} cells, skipped {} already present; results in {}",
                summary.executed,
                summary.skipped,
                out.display()
            );
        }
        Command::Report { input, out } => {
            print!("{}", cmd_report(&input, &out)?);
        }
        Command::Gradcheck { perturb } => {
            let results = cmd_gradcheck(perturb)?;
            for r in &results {
                println!("{}", r.summary_line());
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", results.len());
                return Ok(EXIT_GRADCHECK);
            }
            println!("all {} checks passed", results.len());
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
