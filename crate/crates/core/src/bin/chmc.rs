fn main() {
    std::process::exit(chmc::cli::run(std::env::args_os()));
}
