fn main() {
    std::process::exit(advbench::cli::cli_main(std::env::args()));
}
