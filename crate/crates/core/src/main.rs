fn main() {
    std::process::exit(calip::cli::run());
}
