fn main() {
    std::process::exit(idxcover_cli::run(std::env::args_os()));
}
