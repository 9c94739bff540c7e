fn main() {
    std::process::exit(diffseg_cli::run(std::env::args_os()));
}
