use std::process::ExitCode;

fn main() -> ExitCode {
    fwnet::cli::main_impl()
}
