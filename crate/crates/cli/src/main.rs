fn main() {
    std::process::exit(can_cli::run(std::env::args_os()));
}
