fn main() {
    std::process::exit(vortex::cli::cli_main(std::env::args_os()));
}
