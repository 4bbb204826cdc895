fn main() {
    std::process::exit(multiid::cli::main());
}
