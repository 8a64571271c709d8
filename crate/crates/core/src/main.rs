fn main() {
    std::process::exit(avdit::cli::run(std::env::args_os()));
}
