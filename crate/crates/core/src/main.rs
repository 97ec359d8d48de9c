fn main() {
    std::process::exit(corrbalance::cli::run(std::env::args_os()));
}
