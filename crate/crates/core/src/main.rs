fn main() {
    std::process::exit(hierdrive::cli::run(std::env::args_os()));
}
