fn main() {
    std::process::exit(triamese::cli::run(std::env::args_os()));
}
