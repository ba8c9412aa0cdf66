fn main() {
    std::process::exit(svp_core::cli::cli_dispatch(std::env::args_os()));
}
