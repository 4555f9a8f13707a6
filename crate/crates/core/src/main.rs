fn main() {
    std::process::exit(dwnet::cli::run_from(std::env::args_os()));
}
