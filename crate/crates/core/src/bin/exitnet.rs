fn main() {
    std::process::exit(exitnet::cli::run(std::env::args_os()));
}
