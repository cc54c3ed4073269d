fn main() {
    std::process::exit(tse::cli::main());
}
