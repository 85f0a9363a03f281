use clap::{Args, Parser, Subcommand};
use slice_cli::{inspect, mine_cmd, run};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "slice",
    about = "Conflict-aware low-rank adapter initialization experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output location.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker-pool width for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Print the resolved sweep grid without running anything.
    #[arg(long, default_value_t = false)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep grid x seeds and aggregate the metric suite.
    Run(CommonArgs),
    /// Mine maximally gradient-conflicting task subsets from a pool.
    Mine {
        #[command(flatten)]
        common: CommonArgs,
        /// Subset size (overrides the manifest's miner.subset_size).
        #[arg(long)]
        subset_size: Option<usize>,
        /// How many top candidates to keep (overrides miner.top_k).
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Run initialization stages only and report surgery/rescale diagnostics.
    InspectInit(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run::cmd_run(
            &args.config,
            args.out.as_deref(),
            args.jobs,
            args.dry_run,
        )
        .map(|report| {
            if !args.dry_run {
                println!(
                    "completed {} run(s) across {} cell(s); aggregate at {}",
                    report.runs,
                    report.cells,
                    report.aggregate_path.display()
                );
            }
        }),
        Command::Mine {
            common,
            subset_size,
            top_k,
        } => {
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("mined.json"));
            mine_cmd::cmd_mine(&common.config, &out, subset_size, top_k).map(|report| {
                println!(
                    "mined pool of {}: visited {} subsets, best mean pairwise cosine {:.4}; output at {}",
                    report.pool_size,
                    report.subsets_visited,
                    report.best_phi_bar,
                    out.display()
                );
            })
        }
        Command::InspectInit(args) => {
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from("inspect.json"));
            inspect::cmd_inspect_init(&args.config, &out).map(|report| {
                println!(
                    "initialization report for task {} ({}) at {}",
                    report.task_index,
                    report.method,
                    out.display()
                );
            })
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
