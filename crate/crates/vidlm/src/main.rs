use std::process::ExitCode;

fn main() -> ExitCode {
    // Die quietly when a pipe closes, like any shell tool.
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    ExitCode::from(vidlm::cli::run(std::env::args_os()) as u8)
}
