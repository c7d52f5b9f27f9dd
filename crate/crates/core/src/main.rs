fn main() {
    std::process::exit(stata_core::cli::run(std::env::args_os()));
}
