use std::process::ExitCode;

fn main() -> ExitCode {
    lmdpp::cli::run(std::env::args().collect())
}
