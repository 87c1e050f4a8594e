fn main() {
    std::process::exit(copolymer::cli::cli_main(std::env::args_os()));
}
