use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polarspike::cli::{cmd_eval, cmd_profile, cmd_simulate, cmd_train, Overrides};
use polarspike::Result;

#[derive(Parser)]
#[command(name = "polarspike", version, about = "Event-based shape from polarization with spiking UNets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct NetFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// single | multi
    #[arg(long)]
    mode: Option<String>,
    /// nearest | bilinear
    #[arg(long)]
    upsample: Option<String>,
    /// if | lif | plif
    #[arg(long)]
    neuron: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render scenes and simulate their event streams
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a network on a simulated dataset
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        net: NetFlags,
    },
    /// Angular error of a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train | test | all
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Spiking rates and synaptic-operation energy of a checkpoint
    Profile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn split(s: &str) -> Option<&str> {
    (s != "all").then_some(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let ov = Overrides { seed, ..Default::default() };
            let s = cmd_simulate(&config, &out, &ov)?;
            for (name, split, n) in s.scenes {
                println!("{name:<12} {split:<6} {n} events");
            }
        }
        Command::Train { config, data, out, net } => {
            let ov = Overrides {
                seed: net.seed,
                mode: net.mode,
                upsample: net.upsample,
                neuron: net.neuron,
            };
            let s = cmd_train(&config, &data, &out, &ov)?;
            if let Some(last) = s.history.last() {
                print!("epoch {} loss {:.5}", last.epoch, last.loss);
                if let Some(e) = &last.eval {
                    print!(" test MAE {:.2} deg", e.mae);
                }
                println!();
            }
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Eval { checkpoint, data, out, split: sp } => {
            let r = cmd_eval(&checkpoint, &data, &out, split(&sp))?;
            print!("{}", r.to_csv());
        }
        Command::Profile { checkpoint, data, out, split: sp } => {
            let s = cmd_profile(&checkpoint, &data, &out, split(&sp))?;
            for (t, l) in s.traces.iter().zip(&s.report.layers) {
                println!("{:<8} rate {:.4}", t.name, l.rate);
            }
            println!(
                "OP_AC {:.4e}  OP_MAC {:.4e}  energy {:.4e} J  ANN {:.4e} J  ratio {:.2}x",
                s.report.op_ac,
                s.report.op_mac,
                s.report.energy_joules,
                s.ann.energy_joules,
                s.report.benefit_over(&s.ann)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
