fn main() {
    std::process::exit(crowdcount::cli::run(std::env::args_os()));
}
