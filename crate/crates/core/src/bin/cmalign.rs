fn main() {
    std::process::exit(cmalign::cli::run(std::env::args_os()));
}
