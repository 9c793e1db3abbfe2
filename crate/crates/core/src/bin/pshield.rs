fn main() {
    std::process::exit(pshield::cli::run(std::env::args_os()));
}
