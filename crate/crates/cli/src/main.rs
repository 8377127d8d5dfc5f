fn main() {
    std::process::exit(tapamp_cli::run(std::env::args_os()));
}
