use std::process::ExitCode;

fn main() -> ExitCode {
    match clalab_cli::run_args(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("clalab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
