fn main() {
    std::process::exit(heritkit::cli::run(std::env::args_os()));
}
