fn main() {
    std::process::exit(fedscore::cli::main_with_args(std::env::args_os()));
}
