fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(molfield_cli::run(&argv));
}
