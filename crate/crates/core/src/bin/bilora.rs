fn main() {
    std::process::exit(bilora::cli::main());
}
