fn main() {
    std::process::exit(privalign::harness::cli::run(std::env::args_os()));
}
