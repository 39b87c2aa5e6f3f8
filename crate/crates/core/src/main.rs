fn main() {
    std::process::exit(finelip::cli::run(std::env::args_os()));
}
