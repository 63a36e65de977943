fn main() {
    std::process::exit(fbsde::cli::main());
}
