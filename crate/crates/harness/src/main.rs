fn main() {
    std::process::exit(m3esr::cli::run(std::env::args_os()));
}
