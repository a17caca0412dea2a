fn main() {
    std::process::exit(lifemap::cli::run(std::env::args_os()));
}
