fn main() {
    std::process::exit(smpc::cli::run());
}
