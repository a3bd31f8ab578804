fn main() {
    std::process::exit(safe_esc_cli::main_with_args(std::env::args_os()));
}
