fn main() {
    std::process::exit(actguard::cli::run(std::env::args_os()));
}
