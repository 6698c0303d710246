fn main() {
    std::process::exit(kobo::cli::dispatch(std::env::args_os()));
}
