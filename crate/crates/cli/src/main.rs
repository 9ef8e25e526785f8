fn main() {
    std::process::exit(gpide_cli::run(std::env::args_os()));
}
