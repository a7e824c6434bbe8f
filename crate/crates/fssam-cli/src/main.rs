fn main() {
    std::process::exit(fssam_cli::cli_main(std::env::args().skip(1)));
}
