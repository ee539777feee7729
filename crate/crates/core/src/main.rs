fn main() {
    std::process::exit(natgrad::cli::main());
}
