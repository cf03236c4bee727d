fn main() {
    std::process::exit(scenegan::cli::run(std::env::args_os()));
}
