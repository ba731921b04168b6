fn main() {
    std::process::exit(symfuse_cli::run(std::env::args()));
}
