use std::process::ExitCode;

fn main() -> ExitCode {
    mfgc::cli::main_with_args(std::env::args_os())
}
