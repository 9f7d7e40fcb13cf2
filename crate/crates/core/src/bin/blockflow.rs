fn main() {
    let code = blockflow::cli::run_cli(std::env::args());
    std::process::exit(code);
}
