fn main() {
    std::process::exit(seglab_cli::run_cli(std::env::args_os()));
}
