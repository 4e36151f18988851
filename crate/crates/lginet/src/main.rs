fn main() {
    std::process::exit(lginet::cli::run());
}
