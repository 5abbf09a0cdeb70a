fn main() {
    std::process::exit(bhfa::cli::run(std::env::args_os()));
}
