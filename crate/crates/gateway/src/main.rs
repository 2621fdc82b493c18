use std::process::ExitCode;

fn main() -> ExitCode {
    intentdial_gateway::cli::main_from(std::env::args_os())
}
