fn main() {
    std::process::exit(autodyn_cli::run(std::env::args_os().collect()));
}
