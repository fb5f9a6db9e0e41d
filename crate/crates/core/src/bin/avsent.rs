fn main() {
    std::process::exit(avsent::cli::run_pipeline(std::env::args_os()));
}
