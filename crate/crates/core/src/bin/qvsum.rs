fn main() {
    std::process::exit(qvsum::cli::main_with(std::env::args_os()));
}
