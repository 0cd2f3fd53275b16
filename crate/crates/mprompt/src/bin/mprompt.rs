use std::process::ExitCode;

fn main() -> ExitCode {
    mprompt::cli::main()
}
