fn main() {
    std::process::exit(epsim::cli::run());
}
