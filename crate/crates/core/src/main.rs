fn main() {
    std::process::exit(spinforge::cli::main_with_args(std::env::args().collect()));
}
