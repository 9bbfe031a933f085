fn main() {
    std::process::exit(zeroi2v::cli::run());
}
