fn main() {
    std::process::exit(cogcap_cli::cli_main(std::env::args_os()));
}
