fn main() {
    std::process::exit(sspnet::cli::main_with_args(std::env::args_os()));
}
