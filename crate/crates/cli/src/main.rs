mod args;
mod commands;
mod dataset;
mod error;
mod eval;
mod svg;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, CodecCommand, Command, TrainCommand};
use error::CliResult;

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Datagen(a) => commands::datagen(&a),
        Command::MaskGen(a) => commands::mask_gen(&a),
        Command::Train(TrainCommand::Lic(a)) => commands::train_lic_cmd(&a),
        Command::Train(TrainCommand::Nerv(a)) => commands::train_nerv_cmd(&a),
        Command::Codec(CodecCommand::Encode(a)) => commands::encode(&a),
        Command::Codec(CodecCommand::Decode(a)) => commands::decode(&a),
        Command::Eval(a) => eval::eval(&a),
        Command::RdCurve(a) => eval::rd_curve(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
