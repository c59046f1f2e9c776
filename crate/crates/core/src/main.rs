fn main() {
    std::process::exit(chaincqg::cli::main());
}
