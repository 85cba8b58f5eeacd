fn main() {
    std::process::exit(deflow::cli::run(std::env::args_os()));
}
