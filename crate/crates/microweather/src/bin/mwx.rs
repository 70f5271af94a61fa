fn main() {
    std::process::exit(microweather::cli::run(std::env::args_os()));
}
