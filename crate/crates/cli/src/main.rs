fn main() {
    std::process::exit(hypersurf_cli::run(std::env::args_os()));
}
