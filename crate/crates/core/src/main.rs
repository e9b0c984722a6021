use std::process::ExitCode;

fn main() -> ExitCode {
    match dknn::cli::run_args(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dknn: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
