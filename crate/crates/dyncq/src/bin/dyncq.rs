fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(dyncq::cli::main_with(args));
}
