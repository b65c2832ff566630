fn main() {
    std::process::exit(hvat::cli::main());
}
