fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(cgnet_cli::run_command(&argv));
}
