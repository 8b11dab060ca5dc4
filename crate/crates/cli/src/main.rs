fn main() {
    std::process::exit(qspace_cli::run(std::env::args_os()));
}
