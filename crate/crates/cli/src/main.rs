fn main() {
    std::process::exit(varterm_cli::run(std::env::args_os()));
}
