fn main() {
    std::process::exit(paths::cli::run(std::env::args_os()));
}
