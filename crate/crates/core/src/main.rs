fn main() {
    std::process::exit(propdetect::cli::run(std::env::args_os()));
}
