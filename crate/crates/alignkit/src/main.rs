fn main() {
    std::process::exit(alignkit::cli::run(std::env::args_os()));
}
