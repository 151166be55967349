fn main() {
    std::process::exit(mca::cli::dispatch(std::env::args_os()));
}
