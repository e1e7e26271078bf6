fn main() {
    std::process::exit(crlc_cli::run(std::env::args_os()));
}
