fn main() {
    std::process::exit(segfree::cli::run(std::env::args_os()));
}
