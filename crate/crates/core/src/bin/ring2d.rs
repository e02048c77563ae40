fn main() {
    std::process::exit(ring2d::cli::main_with_args(std::env::args_os()));
}
