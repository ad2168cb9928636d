fn main() {
    std::process::exit(eproc::cli::run(std::env::args_os()));
}
