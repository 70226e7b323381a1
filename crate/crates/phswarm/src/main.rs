fn main() {
    std::process::exit(phswarm::cli::run(std::env::args_os()));
}
