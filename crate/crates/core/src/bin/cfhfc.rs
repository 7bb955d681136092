fn main() {
    std::process::exit(cfhfc::cli::main_with_args(std::env::args_os()));
}
