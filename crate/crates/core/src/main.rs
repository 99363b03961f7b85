fn main() {
    // The subcommands stream CSV to stdout, so dying quietly when the
    // reader closes the pipe (lpss ... | head) is the right behavior.
    // Rust ignores SIGPIPE by default, which would turn the closed pipe
    // into a println! panic instead.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(lpss::cli::run_cli(std::env::args_os()));
}
