fn main() {
    std::process::exit(vmpo::cli::run(std::env::args_os()));
}
