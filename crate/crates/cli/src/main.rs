fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(normbench::run_cli(&args));
}
