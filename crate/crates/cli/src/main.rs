use std::process::ExitCode;

fn main() -> ExitCode {
    let mut stdout = std::io::stdout().lock();
    ExitCode::from(pag_cli::cli::main_with(std::env::args_os(), &mut stdout) as u8)
}
