fn main() {
    std::process::exit(mmlayout::cli::run(std::env::args_os()));
}
