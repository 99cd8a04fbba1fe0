fn main() {
    std::process::exit(flatasep::cli::run(std::env::args_os()));
}
