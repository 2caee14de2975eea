fn main() {
    std::process::exit(fba_core::cli::run(std::env::args_os()));
}
