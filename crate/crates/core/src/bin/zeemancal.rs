fn main() {
    std::process::exit(zeemancal::cli::run(std::env::args_os()));
}
