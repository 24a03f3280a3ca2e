fn main() {
    std::process::exit(mtnet::cli::run(std::env::args_os()));
}
