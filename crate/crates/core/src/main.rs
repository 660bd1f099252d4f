fn main() {
    std::process::exit(nlos_ltm::cli::run(std::env::args_os()));
}
