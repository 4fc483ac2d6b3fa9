fn main() {
    std::process::exit(dlcm::cli::run());
}
