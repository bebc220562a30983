fn main() {
    std::process::exit(fastfwd_cli::run(std::env::args_os()));
}
