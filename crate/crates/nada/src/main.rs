use std::process::ExitCode;

fn main() -> ExitCode {
    // Rust ignores SIGPIPE, so `nada ... | head` would panic mid-print.
    // Restore the default so a closed pipe ends the process quietly.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    ExitCode::from(nada::cli::run(std::env::args().skip(1)))
}
