fn main() {
    std::process::exit(ddcot_core::cli::main_with_args(std::env::args_os()));
}
