fn main() {
    std::process::exit(gsdu::cli::main());
}
