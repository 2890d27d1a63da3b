fn main() {
    std::process::exit(petseg::cli::run(std::env::args_os()));
}
