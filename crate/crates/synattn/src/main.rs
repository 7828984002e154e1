fn main() {
    std::process::exit(synattn::cli::run());
}
