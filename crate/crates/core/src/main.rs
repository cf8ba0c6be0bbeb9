fn main() {
    std::process::exit(iceflow::cli::run(std::env::args_os()));
}
