fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(direct_flow::run_command(&argv));
}
