fn main() {
    std::process::exit(uiforge::cli::run(std::env::args_os()));
}
