fn main() {
    std::process::exit(pgat::cli::run(std::env::args_os()));
}
