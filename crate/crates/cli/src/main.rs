use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fuota_cli::{load_scenario, run_scenario, OutputOptions, Overrides};
use fuota_core::Scheme;

/// Simulate D2D-assisted update broadcast in a LoRaWAN cell.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// Preset (fig3, fig4, fig5, fig6, table2) or path to a TOML scenario.
    #[arg(long)]
    scenario: String,
    /// Comma-separated schemes, replacing the scenario's list.
    #[arg(long, value_delimiter = ',')]
    scheme: Option<Vec<Scheme>>,
    /// Replications per (scheme, sweep point).
    #[arg(long)]
    runs: Option<u32>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Write a frame-level trace of the first replication.
    #[arg(long)]
    dump_trace: bool,
    /// Write the per-frame slot plan.
    #[arg(long)]
    dump_slot_plan: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = load_scenario(&args.scenario).and_then(|mut scenario| {
        Overrides {
            schemes: args.scheme,
            runs: args.runs,
            seed: args.seed,
        }
        .apply(&mut scenario);
        run_scenario(
            &scenario,
            &args.out,
            OutputOptions {
                dump_trace: args.dump_trace,
                dump_slot_plan: args.dump_slot_plan,
            },
        )
    });
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
