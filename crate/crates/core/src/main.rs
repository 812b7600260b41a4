fn main() {
    std::process::exit(moelab::cli::main_with_args(std::env::args_os()));
}
