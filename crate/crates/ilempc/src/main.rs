fn main() {
    std::process::exit(ilempc::cli::main());
}
