fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(tlmk::cli::run_command(&argv));
}
