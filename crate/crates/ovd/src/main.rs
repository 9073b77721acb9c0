fn main() {
    std::process::exit(ovd::cli::main_with_args(std::env::args_os()));
}
