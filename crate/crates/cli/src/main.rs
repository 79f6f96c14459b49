fn main() {
    std::process::exit(exlgm_cli::run(std::env::args_os()));
}
