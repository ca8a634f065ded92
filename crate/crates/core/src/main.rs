fn main() {
    std::process::exit(dirlab::report::cli::cli_main(std::env::args_os()));
}
