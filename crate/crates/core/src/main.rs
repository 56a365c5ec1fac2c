fn main() {
    std::process::exit(docstore::cli::run(std::env::args_os()));
}
