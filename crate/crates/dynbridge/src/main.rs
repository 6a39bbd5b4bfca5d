fn main() {
    std::process::exit(dynbridge::cli::main_with_args(std::env::args_os()));
}
