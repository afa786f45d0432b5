fn main() {
    std::process::exit(disencrs::cli::run(std::env::args_os()));
}
