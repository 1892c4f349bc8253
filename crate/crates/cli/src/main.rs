fn main() {
    std::process::exit(rotunet_cli::run(std::env::args_os()));
}
