fn main() {
    std::process::exit(attnlab_cli::run(std::env::args_os()));
}
