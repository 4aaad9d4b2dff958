use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsim_cli::commands::{
    cmd_ablation, cmd_compare, cmd_serve, cmd_simulate, cmd_sweep, cmd_worker, CmdError, ConfigArgs,
};
use fedsim_core::profiles::SchedulerKind;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Resource-budgeted federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigOpts {
    /// TOML configuration file; defaults apply when omitted.
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set scheduler=greedy`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl From<ConfigOpts> for ConfigArgs {
    fn from(o: ConfigOpts) -> Self {
        ConfigArgs {
            path: o.config,
            overrides: o.set,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write trace.jsonl, rounds.csv, clients.csv, summary.json.
    Simulate(ConfigOpts),
    /// Run one round's participants under each scheduler; write compare.csv.
    Compare {
        #[command(flatten)]
        opts: ConfigOpts,
        /// Comma-separated scheduler names.
        #[arg(long, value_delimiter = ',', default_value = "greedy,resource-aware")]
        schedulers: Vec<SchedulerKind>,
    },
    /// Run the B1..B4 ladder; write ablation.csv.
    Ablation(ConfigOpts),
    /// Repeat the experiment over values of one key; write sweep.csv.
    Sweep {
        #[command(flatten)]
        opts: ConfigOpts,
        /// Dotted configuration key to vary.
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Live coordinator.
    Serve {
        #[command(flatten)]
        opts: ConfigOpts,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        workers_expected: Option<usize>,
        #[arg(long)]
        time_dilation: Option<f64>,
    },
    /// Live worker hosting one executor.
    Worker {
        #[arg(long)]
        connect: String,
        /// Connection attempts before giving up.
        #[arg(long, default_value_t = 50)]
        attempts: u32,
    },
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Simulate(o) => cmd_simulate(&o.into()).map(drop),
        Command::Compare { opts, schedulers } => cmd_compare(&opts.into(), &schedulers).map(drop),
        Command::Ablation(o) => cmd_ablation(&o.into()).map(drop),
        Command::Sweep { opts, key, values } => cmd_sweep(&opts.into(), &key, &values).map(drop),
        Command::Serve {
            opts,
            bind,
            workers_expected,
            time_dilation,
        } => cmd_serve(&opts.into(), bind, workers_expected, time_dilation).map(drop),
        Command::Worker { connect, attempts } => cmd_worker(&connect, attempts).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
