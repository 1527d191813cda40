fn main() {
    std::process::exit(ghnforge_cli::run(std::env::args_os()));
}
