fn main() {
    std::process::exit(ivqr_core::cli::run(std::env::args_os()));
}
