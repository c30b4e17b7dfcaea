fn main() {
    std::process::exit(kfp::cli::run(std::env::args_os()));
}
