mod args;
mod commands;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};

const FAILED_MARKER: &str = ".failed";

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.global.out.clone();
    match run(&cli) {
        Ok(()) => {
            let _ = fs::remove_file(out.join(FAILED_MARKER));
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            mark_failed(&out, &format!("{err:#}"));
            ExitCode::FAILURE
        }
    }
}

fn mark_failed(out: &Path, message: &str) {
    if fs::create_dir_all(out).is_ok() {
        let _ = fs::write(out.join(FAILED_MARKER), format!("{message}\n"));
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    commands::prepare_out(cli)?;
    let g = &cli.global;
    match &cli.command {
        Command::Gen(a) => commands::cmd_gen(g, a),
        Command::Train(a) => commands::cmd_train(g, a),
        Command::Eval(a) => commands::cmd_eval(g, a),
        Command::Sweep(a) => commands::cmd_sweep(g, a),
        Command::Ablation(a) => commands::cmd_ablation(g, a),
        Command::Baseline(a) => commands::cmd_baseline(g, a),
        Command::Entropy(a) => commands::cmd_entropy(g, a),
    }
}
