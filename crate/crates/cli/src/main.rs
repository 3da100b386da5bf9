fn main() {
    std::process::exit(cofine_cli::cli::dispatch(std::env::args_os()));
}
