fn main() {
    std::process::exit(visguide::cli::main_with_args(std::env::args_os().collect()));
}
