use std::process::ExitCode;

fn main() -> ExitCode {
    poisson_inla::cli::run(std::env::args_os())
}
