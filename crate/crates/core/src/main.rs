fn main() {
    std::process::exit(agestab::cli::main_with_args(std::env::args_os()));
}
