fn main() {
    std::process::exit(san::cli::run());
}
