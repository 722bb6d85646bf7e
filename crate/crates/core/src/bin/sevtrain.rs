fn main() {
    std::process::exit(sevtrain::runner::cli::run(std::env::args_os()));
}
