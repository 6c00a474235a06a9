fn main() {
    std::process::exit(codail_cli::run(std::env::args_os()));
}
