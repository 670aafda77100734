fn main() {
    std::process::exit(spiro_core::cli::run(std::env::args_os()));
}
