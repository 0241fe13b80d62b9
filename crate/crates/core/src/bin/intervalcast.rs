fn main() {
    std::process::exit(intervalcast::cli::main());
}
