fn main() {
    std::process::exit(noisefacts::cli::run_from(std::env::args_os()));
}
