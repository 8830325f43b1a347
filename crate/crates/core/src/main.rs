fn main() {
    std::process::exit(daae::cli::run(std::env::args_os()));
}
