use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use duoheap_cli::{cmd_gen_trace, cmd_run, cmd_sweep};

#[derive(Parser)]
#[command(name = "duoheap", version, about = "Dual-heap runtime experiment harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay the trace named in a config file and write one CSV row.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run once per value of one parameter and write a normalized CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// card_segment, stripe_size, h1_size, write_strategy or mode
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 512,1KiB,4KiB
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write a synthetic trace.
    GenTrace {
        /// pagerank_like, cc_like or uniform
        #[arg(long)]
        profile: String,
        #[arg(long)]
        scale: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { config } => cmd_run(&config).map(|r| {
            eprintln!(
                "{}: {} minor / {} major collections, {} objects moved to H2",
                r.run_id, r.gc.minor_collections, r.gc.major_collections, r.gc.objects_moved_to_h2
            )
        }),
        Cmd::Sweep { config, param, values } => {
            cmd_sweep(&config, &param, &values).map(|rs| eprintln!("{} runs", rs.len()))
        }
        Cmd::GenTrace { profile, scale, seed, out } => {
            cmd_gen_trace(&profile, scale, seed, &out).map(|t| eprintln!("{} events", t.events.len()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
